"""Kling-Gupta efficiency family and auxiliary skill scores.

Statistics are population (divide-by-N) moments. Correlation is defined as 0
when the simulation has zero variance, which makes the observed-mean
benchmark score exactly ``KGE = 1 - sqrt(2)`` and ``KGE_ss = 0``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

SQRT2 = math.sqrt(2.0)
PERCENTILE_LABELS = ("worst", "5%", "25%", "50%", "75%", "95%")
_PERCENTILES = (5.0, 25.0, 50.0, 75.0, 95.0)


class DegenerateObserved(ValueError):
    pass


@dataclass(frozen=True)
class KgeComponents:
    alpha: float
    beta: float
    rho: float
    kge: float
    kge_ss: float

    @property
    def gamma(self) -> float:
        return self.rho

    @property
    def a_score(self) -> float:
        """Variability ratio mapped to 1 - |1 - alpha|."""
        return 1.0 - abs(1.0 - self.alpha)

    @property
    def b_score(self) -> float:
        """Mass-balance ratio mapped to 1 - |1 - beta|."""
        return 1.0 - abs(1.0 - self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["A"] = self.a_score
        d["B"] = self.b_score
        return d


def kge_from_components(alpha: float, beta: float, rho: float) -> float:
    return 1.0 - math.sqrt((rho - 1.0) ** 2 + (beta - 1.0) ** 2 + (alpha - 1.0) ** 2)


def kge_ss(kge_value: float) -> float:
    return 1.0 - (1.0 - kge_value) / SQRT2


def _prepare(sim, obs):
    sim = np.asarray(sim, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if sim.shape != obs.shape or sim.ndim != 1:
        raise ValueError(f"sim and obs must be 1-D of equal length, got {sim.shape} and {obs.shape}")
    if len(sim) < 2:
        raise ValueError("need at least two values")
    return sim, obs


def kge(sim, obs) -> KgeComponents:
    sim, obs = _prepare(sim, obs)
    mu_o = obs.mean()
    sd_o = obs.std()
    if sd_o == 0.0 or mu_o == 0.0:
        raise DegenerateObserved("observed series has zero variance or zero mean")
    mu_s = sim.mean()
    sd_s = sim.std()
    alpha = sd_s / sd_o
    beta = mu_s / mu_o
    if sd_s == 0.0:
        rho = 0.0
    else:
        rho = float(np.mean((sim - mu_s) * (obs - mu_o)) / (sd_s * sd_o))
    k = kge_from_components(alpha, beta, rho)
    return KgeComponents(float(alpha), float(beta), rho, k, kge_ss(k))


def kge_loss_grad(sim, obs) -> tuple[float, np.ndarray]:
    """``1 - KGE`` and its gradient with respect to ``sim``."""
    sim, obs = _prepare(sim, obs)
    n = len(sim)
    c = kge(sim, obs)
    mu_o, sd_o = obs.mean(), obs.std()
    mu_s, sd_s = sim.mean(), sim.std()
    dist = 1.0 - c.kge
    if dist == 0.0 or sd_s == 0.0:
        return dist, np.zeros(n)
    ds = sim - mu_s
    do = obs - mu_o
    d_beta = np.full(n, 1.0 / (n * mu_o))
    d_alpha = ds / (n * sd_s * sd_o)
    d_rho = do / (n * sd_s * sd_o) - c.rho * ds / (n * sd_s**2)
    grad = ((c.rho - 1.0) * d_rho + (c.beta - 1.0) * d_beta + (c.alpha - 1.0) * d_alpha) / dist
    return dist, grad


def aux_metrics(sim, obs) -> tuple[float, float, float]:
    """Nash-Sutcliffe efficiency, RMSE and MAE (mm/day)."""
    sim, obs = _prepare(sim, obs)
    err = sim - obs
    denom = np.sum((obs - obs.mean()) ** 2)
    if denom == 0.0:
        raise DegenerateObserved("observed series has zero variance")
    nse = 1.0 - np.sum(err**2) / denom
    return float(nse), float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))


@dataclass
class AnnualTable:
    years: dict  # water year -> KgeComponents
    flagged: list  # water years excluded as degenerate
    percentiles: dict  # label -> {kge_ss, alpha, beta, rho}

    def kge_ss(self) -> np.ndarray:
        return np.array([c.kge_ss for c in self.years.values()])


def _summary(values: np.ndarray) -> dict:
    out = {"worst": float(values.min())}
    for label, q in zip(PERCENTILE_LABELS[1:], _PERCENTILES):
        out[label] = float(np.percentile(values, q))
    return out


def annual_kge_ss(sim, obs, water_years) -> AnnualTable:
    """Per-water-year components with percentile summaries.

    ``worst`` is the minimum; the other entries interpolate linearly between
    order statistics. Years whose observations are degenerate are flagged
    and left out of the summary.
    """
    sim, obs = _prepare(sim, obs)
    wy = np.asarray(water_years)
    years, flagged = {}, []
    for y in np.unique(wy):
        m = wy == y
        try:
            years[int(y)] = kge(sim[m], obs[m])
        except (DegenerateObserved, ValueError):
            flagged.append(int(y))
            warnings.warn(f"water year {int(y)} skipped: degenerate observations", RuntimeWarning, stacklevel=2)
    if not years:
        raise DegenerateObserved("no water year could be scored")
    comps = list(years.values())
    pct = {}
    for name in ("kge_ss", "alpha", "beta", "rho"):
        s = _summary(np.array([getattr(c, name) for c in comps]))
        for label, v in s.items():
            pct.setdefault(label, {})[name] = v
    return AnnualTable(years, flagged, pct)


def group_metrics(sim, obs, groups) -> dict:
    """Components per flow-magnitude group.

    ``groups`` is a per-timestep array (or a FlowGroupMask) of group indices;
    0 marks steps outside every group. Degenerate groups map to ``None``.
    """
    sim, obs = _prepare(sim, obs)
    g = np.asarray(getattr(groups, "group", groups))
    out = {}
    for k in sorted(set(np.unique(g).tolist()) - {0}):
        m = g == k
        try:
            out[int(k)] = kge(sim[m], obs[m])
        except (DegenerateObserved, ValueError):
            warnings.warn(f"flow group {k} skipped: degenerate observations", RuntimeWarning, stacklevel=2)
            out[int(k)] = None
    return out


@dataclass
class DiagnosticReport:
    overall: dict  # subset name -> KgeComponents
    annual: AnnualTable
    groups: dict  # group -> KgeComponents | None
    auxiliary: dict  # subset name -> {"NSE", "RMSE", "MAE"}
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "overall": {k: v.to_dict() for k, v in self.overall.items()},
            "annual": {
                "years": {str(y): c.to_dict() for y, c in self.annual.years.items()},
                "flagged": self.annual.flagged,
                "percentiles": self.annual.percentiles,
            },
            "flow_groups": {str(k): (v.to_dict() if v else None) for k, v in self.groups.items()},
            "auxiliary": self.auxiliary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_float)

    def format_tables(self) -> str:
        """Aligned plain-text tables: annual percentiles, flow groups, subsets."""
        lines = ["Annual KGE_ss percentiles", f"{'':8s}{'KGE_ss':>10s}{'alpha':>10s}{'beta':>10s}{'gamma':>10s}"]
        for label in PERCENTILE_LABELS:
            r = self.annual.percentiles[label]
            lines.append(f"{label:8s}{r['kge_ss']:10.3f}{r['alpha']:10.3f}{r['beta']:10.3f}{r['rho']:10.3f}")
        lines += ["", "Flow groups", f"{'group':8s}{'KGE_ss':>10s}{'alpha':>10s}{'beta':>10s}{'gamma':>10s}"]
        for k, c in self.groups.items():
            if c is None:
                lines.append(f"{k:<8d}{'n/a':>10s}")
                continue
            lines.append(f"{k:<8d}{c.kge_ss:10.3f}{c.alpha:10.3f}{c.beta:10.3f}{c.gamma:10.3f}")
        lines += [
            "",
            "Subsets",
            f"{'subset':8s}{'KGE_ss':>10s}{'alpha':>10s}{'beta':>10s}{'gamma':>10s}{'NSE':>10s}{'RMSE':>10s}{'MAE':>10s}",
        ]
        for name, c in self.overall.items():
            a = self.auxiliary.get(name, {})
            lines.append(
                f"{name:8s}{c.kge_ss:10.3f}{c.alpha:10.3f}{c.beta:10.3f}{c.gamma:10.3f}"
                f"{a.get('NSE', math.nan):10.3f}{a.get('RMSE', math.nan):10.3f}{a.get('MAE', math.nan):10.3f}"
            )
        return "\n".join(lines) + "\n"


def _json_float(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
