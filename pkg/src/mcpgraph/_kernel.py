"""Compiled time stepping and its reverse-mode sweep.

One step maps (S, R, G, params) -> (S', R', G', Q) for the soil, routing and
groundwater states. ``_step`` optionally fills the local Jacobian of that map;
the backward sweep accumulates vector-Jacobian products from the last step to
the first.
"""

import math

import numpy as np
from numba import njit

# gate kind codes
K_CONST, K_OUT3, K_OUT4, K_LOSS4, K_LOSSPET3, K_BP1, K_BP2, K_MR = range(8)
# gate slots
G_OUT, G_RCH, G_QUICK, G_LOSS, G_BYPASS, G_RT, G_GW, G_MR = range(8)
# scaling vector entries
SC_MS, SC_SS, SC_MR, SC_SR, SC_MG, SC_SG, SC_PEM, SC_PES, SC_UMAX, SC_WS = range(10)

# recorded gate columns
GATE_COLUMNS = (
    "soil.out",
    "soil.recharge",
    "soil.quick",
    "soil.loss_unconstrained",
    "soil.loss",
    "soil.bypass",
    "soil.remember",
    "routing.out",
    "routing.remember",
    "groundwater.out",
    "groundwater.mr",
    "groundwater.remember",
)
FLUX_COLUMNS = (
    "soil.out",
    "soil.recharge",
    "soil.quick",
    "soil.loss",
    "soil.bypass",
    "soil.infiltration",
    "routing.out",
    "groundwater.out",
    "groundwater.mr",
)


@njit(cache=True)
def _sig(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _gate(kind, p, off, x, xcol, xscale, pe, dg, jac):
    """Output/loss gate value; fills dg (d gate / d [S, R, G, params]) when jac."""
    if kind == K_CONST:
        g = _sig(p[off])
        if jac:
            dg[3 + off] = g * (1.0 - g)
        return g
    if kind == K_OUT3:
        k = _sig(p[off])
        a = math.exp(p[off + 1])
        s = _sig(a * x + p[off + 2])
        g = k * s
        if jac:
            ds = k * s * (1.0 - s)
            dg[3 + off] = s * k * (1.0 - k)
            dg[3 + off + 1] = ds * x * a
            dg[3 + off + 2] = ds
            dg[xcol] += ds * a / xscale
        return g
    if kind == K_OUT4:
        lo = _sig(p[off])
        h = _sig(p[off + 1])
        a = math.exp(p[off + 2])
        s = _sig(a * x + p[off + 3])
        g = lo + (1.0 - lo) * h * s
        if jac:
            ds = (1.0 - lo) * h * s * (1.0 - s)
            dg[3 + off] = lo * (1.0 - lo) * (1.0 - h * s)
            dg[3 + off + 1] = (1.0 - lo) * h * (1.0 - h) * s
            dg[3 + off + 2] = ds * x * a
            dg[3 + off + 3] = ds
            dg[xcol] += ds * a / xscale
        return g
    if kind == K_LOSS4:
        k = _sig(p[off])
        ax = math.exp(p[off + 1])
        ap = math.exp(p[off + 2])
        s = _sig(ax * x + ap * pe + p[off + 3])
        g = k * s
        if jac:
            ds = k * s * (1.0 - s)
            dg[3 + off] = s * k * (1.0 - k)
            dg[3 + off + 1] = ds * x * ax
            dg[3 + off + 2] = ds * pe * ap
            dg[3 + off + 3] = ds
            dg[xcol] += ds * ax / xscale
        return g
    # K_LOSSPET3
    k = _sig(p[off])
    ap = math.exp(p[off + 1])
    s = _sig(ap * pe + p[off + 2])
    g = k * s
    if jac:
        ds = k * s * (1.0 - s)
        dg[3 + off] = s * k * (1.0 - k)
        dg[3 + off + 1] = ds * pe * ap
        dg[3 + off + 2] = ds
    return g


@njit(cache=True)
def _step(p, off, kind, sc, S, R, G, u, pe_raw, rec_g, rec_f, J, jac):
    """Advance one day. Returns (S', R', G', Q, rescaled)."""
    nv = 3 + p.shape[0]
    if jac:
        J[:, :] = 0.0
    d_out = np.zeros(nv) if jac else np.zeros(1)
    d_rch = np.zeros(nv) if jac else np.zeros(1)
    d_qk = np.zeros(nv) if jac else np.zeros(1)
    d_loss = np.zeros(nv) if jac else np.zeros(1)
    d_up = np.zeros(nv) if jac else np.zeros(1)

    xs = (S - sc[SC_MS]) / sc[SC_SS]
    pe = (pe_raw - sc[SC_PEM]) / sc[SC_PES]

    g_out = _gate(kind[G_OUT], p, off[G_OUT], xs, 0, sc[SC_SS], pe, d_out, jac)
    g_rch = 0.0
    if off[G_RCH] >= 0:
        g_rch = _gate(kind[G_RCH], p, off[G_RCH], xs, 0, sc[SC_SS], pe, d_rch, jac)
    g_qk = 0.0
    if off[G_QUICK] >= 0:
        g_qk = _gate(kind[G_QUICK], p, off[G_QUICK], xs, 0, sc[SC_SS], pe, d_qk, jac)
    g_lraw = _gate(kind[G_LOSS], p, off[G_LOSS], xs, 0, sc[SC_SS], pe, d_loss, jac)

    # loss flux capped at PET; ReLU subgradient 0 at the kink
    g_loss = g_lraw
    if S > 0.0 and g_lraw > pe_raw / S:
        g_loss = pe_raw / S
        if jac:
            d_loss[:] = 0.0
            d_loss[0] = -pe_raw / (S * S)

    total = g_out + g_rch + g_qk + g_loss
    rescaled = 0
    if total > 1.0:
        rescaled = 1
        if jac:
            d_tot = d_out + d_rch + d_qk + d_loss
            d_out = d_out / total - g_out * d_tot / (total * total)
            d_rch = d_rch / total - g_rch * d_tot / (total * total)
            d_qk = d_qk / total - g_qk * d_tot / (total * total)
            d_loss = d_loss / total - g_loss * d_tot / (total * total)
        g_out /= total
        g_rch /= total
        g_qk /= total
        g_loss /= total
        total = 1.0
    remember = 1.0 - total

    # input bypass
    up = 0.0
    g_bp = 0.0
    if off[G_BYPASS] >= 0:
        o = off[G_BYPASS]
        if kind[G_BYPASS] == K_BP1:
            cap = sc[SC_WS] * math.exp(p[o])
            v = u + S - cap
            if u > 1e-12 and v > 0.0:
                if v >= u:
                    up = u
                else:
                    up = v
                    if jac:
                        d_up[0] = 1.0
                        d_up[3 + o] = -cap
                g_bp = up / u
        else:
            un = u / sc[SC_UMAX]
            z = xs + un
            s = _sig(p[o + 1] + p[o] * z)
            g_bp = s
            up = s * u
            if jac:
                ds = u * s * (1.0 - s)
                d_up[3 + o] = ds * z
                d_up[3 + o + 1] = ds
                d_up[0] = ds * p[o] / sc[SC_SS]

    f_out = g_out * S
    f_rch = g_rch * S
    f_qk = g_qk * S
    f_loss = g_loss * S
    if f_loss > pe_raw:
        f_loss = pe_raw  # rounding in (PE / S) * S; keeps ET <= PET exact
    # update written as a sum of non-negative terms so rounding cannot
    # push an emptied store below zero
    S_next = remember * S + (g_loss * S - f_loss) + (u - up)

    has_rt = off[G_RT] >= 0
    has_gw = off[G_GW] >= 0

    q = up + f_qk
    if not has_rt:
        q += f_out
    if not has_gw:
        q += f_rch

    if jac:
        # d(g*S) = g e_S + S dg
        J[0, :] = -S * (d_out + d_rch + d_qk + d_loss) - d_up
        J[0, 0] += 1.0 - (g_out + g_rch + g_qk + g_loss)
        J[3, :] = d_up + S * d_qk
        J[3, 0] += g_qk
        if not has_rt:
            J[3, :] += S * d_out
            J[3, 0] += g_out
        if not has_gw:
            J[3, :] += S * d_rch
            J[3, 0] += g_rch

    R_next = R
    g_rt = 0.0
    f_rt = 0.0
    if jac:
        # absent stores carry their (unused) state unchanged
        J[1, 1] = 1.0
        J[2, 2] = 1.0
    if has_rt:
        d_rt = np.zeros(nv) if jac else np.zeros(1)
        xr = (R - sc[SC_MR]) / sc[SC_SR]
        g_rt = _gate(kind[G_RT], p, off[G_RT], xr, 1, sc[SC_SR], pe, d_rt, jac)
        f_rt = g_rt * R
        R_next = (1.0 - g_rt) * R + f_out
        q += f_rt
        if jac:
            J[1, :] = -R * d_rt + S * d_out
            J[1, 1] += 1.0 - g_rt
            J[1, 0] += g_out
            J[3, :] += R * d_rt
            J[3, 1] += g_rt

    G_next = G
    g_gw = 0.0
    f_gw = 0.0
    g_mr = 0.0
    f_mr = 0.0
    c_mm = 0.0
    if has_gw:
        d_gw = np.zeros(nv) if jac else np.zeros(1)
        xg = (G - sc[SC_MG]) / sc[SC_SG]
        g_gw = _gate(kind[G_GW], p, off[G_GW], xg, 2, sc[SC_SG], pe, d_gw, jac)
        f_gw = g_gw * G
        if jac:
            J[2, :] = -G * d_gw + S * d_rch
            J[2, 2] += 1.0 - g_gw
            J[2, 0] += g_rch
            J[3, :] += G * d_gw
            J[3, 2] += g_gw
        if off[G_MR] >= 0:
            o = off[G_MR]
            k = _sig(p[o])
            a = math.exp(p[o + 1])
            lower = -sc[SC_MG] / sc[SC_SG]
            c_s = p[o + 2]
            dc = 1.0
            if c_s < lower:
                c_s = lower
                dc = 0.0
            c_mm = sc[SC_MG] + sc[SC_SG] * c_s
            w = xg - c_s
            th = math.tanh(a * w)
            f = k * th
            rem0 = 1.0 - g_gw
            clamped = f > rem0
            g_mr = rem0 if clamped else f
            dist = G - c_mm
            sgn = 1.0 if dist > 0.0 else (-1.0 if dist < 0.0 else 0.0)
            dist = abs(dist)
            f_mr = g_mr * dist
            if jac:
                if clamped:
                    d_mr = -d_gw
                else:
                    d_mr = np.zeros(nv)
                    dth = k * (1.0 - th * th)
                    d_mr[3 + o] = k * (1.0 - k) * th
                    d_mr[3 + o + 1] = dth * w * a
                    d_mr[3 + o + 2] = -dth * a * dc
                    d_mr[2] = dth * a / sc[SC_SG]
                # d f_mr = dist * d g_mr + g_mr * sgn * (e_G - d c_mm)
                d_fmr = dist * d_mr
                d_fmr[2] += g_mr * sgn
                d_fmr[3 + o + 2] -= g_mr * sgn * sc[SC_SG] * dc
                J[2, :] -= d_fmr
        if f_mr > 0.0:
            # G > c_mm here, so G - f_gw - f_mr = (1 - g_gw - g_mr) G + g_mr c_mm
            G_next = ((1.0 - g_gw) - g_mr) * G + g_mr * c_mm + f_rch
        else:
            G_next = (1.0 - g_gw) * G - f_mr + f_rch
        q += f_gw

    rec_g[0] = g_out
    rec_g[1] = g_rch
    rec_g[2] = g_qk
    rec_g[3] = g_lraw
    rec_g[4] = g_loss
    rec_g[5] = g_bp
    rec_g[6] = remember
    rec_g[7] = g_rt
    rec_g[8] = 1.0 - g_rt if has_rt else 0.0
    rec_g[9] = g_gw
    rec_g[10] = g_mr
    rec_g[11] = 1.0 - g_gw - g_mr if has_gw else 0.0
    rec_f[0] = f_out
    rec_f[1] = f_rch
    rec_f[2] = f_qk
    rec_f[3] = f_loss
    rec_f[4] = up
    rec_f[5] = u - up
    rec_f[6] = f_rt
    rec_f[7] = f_gw
    rec_f[8] = f_mr
    return S_next, R_next, G_next, q, rescaled


@njit(cache=True)
def forward(p, off, kind, sc, precip, pet, init):
    """Full simulation. Returns (states[T+1, 3], gates[T, 12], fluxes[T, 9], q[T], n_rescaled)."""
    T = precip.shape[0]
    states = np.empty((T + 1, 3))
    gates = np.empty((T, len(GATE_COLUMNS)))
    fluxes = np.empty((T, len(FLUX_COLUMNS)))
    q = np.empty(T)
    J = np.zeros((1, 1))
    S, R, G = init[0], init[1], init[2]
    states[0, 0], states[0, 1], states[0, 2] = S, R, G
    n_rescaled = 0
    for t in range(T):
        S, R, G, qt, r = _step(p, off, kind, sc, S, R, G, precip[t], pet[t], gates[t], fluxes[t], J, False)
        q[t] = qt
        n_rescaled += r
        states[t + 1, 0], states[t + 1, 1], states[t + 1, 2] = S, R, G
    return states, gates, fluxes, q, n_rescaled


@njit(cache=True)
def streamflow(p, off, kind, sc, precip, pet, init):
    """Streamflow only; cheaper than :func:`forward` for loss evaluation."""
    T = precip.shape[0]
    q = np.empty(T)
    rg = np.empty(len(GATE_COLUMNS))
    rf = np.empty(len(FLUX_COLUMNS))
    J = np.zeros((1, 1))
    S, R, G = init[0], init[1], init[2]
    for t in range(T):
        S, R, G, qt, _ = _step(p, off, kind, sc, S, R, G, precip[t], pet[t], rg, rf, J, False)
        q[t] = qt
    return q


@njit(cache=True)
def backward(p, off, kind, sc, precip, pet, states, qbar):
    """Gradient of sum_t qbar[t] * Q_t with respect to p."""
    T = precip.shape[0]
    n = p.shape[0]
    J = np.zeros((4, 3 + n))
    rg = np.empty(len(GATE_COLUMNS))
    rf = np.empty(len(FLUX_COLUMNS))
    lam = np.zeros(3)
    grad = np.zeros(n)
    for t in range(T - 1, -1, -1):
        _step(p, off, kind, sc, states[t, 0], states[t, 1], states[t, 2], precip[t], pet[t], rg, rf, J, True)
        new = np.zeros(3)
        for i in range(3):
            new[i] = J[0, i] * lam[0] + J[1, i] * lam[1] + J[2, i] * lam[2] + J[3, i] * qbar[t]
        for j in range(n):
            grad[j] += J[0, 3 + j] * lam[0] + J[1, 3 + j] * lam[1] + J[2, 3 + j] * lam[2] + J[3, 3 + j] * qbar[t]
        lam = new
    return grad


@njit(cache=True)
def step_jacobian(p, off, kind, sc, S, R, G, u, pe):
    """Local Jacobian of one step (for testing)."""
    n = p.shape[0]
    J = np.zeros((4, 3 + n))
    rg = np.empty(len(GATE_COLUMNS))
    rf = np.empty(len(FLUX_COLUMNS))
    out = _step(p, off, kind, sc, S, R, G, u, pe, rg, rf, J, True)
    return J, out[0], out[1], out[2], out[3]
