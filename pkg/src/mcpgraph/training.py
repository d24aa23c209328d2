"""Gradient-based training: KGE loss, reverse-mode gradient, ADAM, seeds.

The loss is ``1 - KGE`` over the Train-labelled steps of one continuous
simulation (spin-up included, so states flow through every period). Its
gradient is computed by a reverse sweep over the unrolled recurrence.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernel as K
from .architectures import GraphSpec, ParamBlock, _allowed_parents, build, inherit_composite, init_params
from .core import NODES, ScalingSet, _as_vector, _init_vector, check_finite, compile_graph, simulate
from .forcing import ForcingSeries, Subset, SubsetMask
from .gates import logistic
from .metrics import DegenerateObserved, kge, kge_loss_grad

log = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"


class NonFiniteLoss(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class AllRunsFailed(RuntimeError):
    pass


class DegenerateState(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    lr: float = 0.25
    lr_after: float = 0.125
    lr_switch: int = 300  # epochs run at ``lr`` before dropping to ``lr_after``
    seeds: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None  # opt-in max gradient norm
    patience: int | None = None  # opt-in early stopping on the Select score

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.lr_after <= 0:
            raise ValueError("learning rates must be positive")

    def learning_rate(self, epoch: int) -> float:
        """Rate for 1-based ``epoch``."""
        return self.lr if epoch <= self.lr_switch else self.lr_after

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params, grad, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if state.m.shape != params.shape:
        raise ValueError("optimizer state does not match parameter shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


class Problem:
    """A graph bound to forcing, target mask, scaling and initial states."""

    def __init__(
        self,
        graph: GraphSpec,
        forcing: ForcingSeries,
        masks: SubsetMask | np.ndarray,
        scaling: ScalingSet | None = None,
        init_states=None,
        target: Subset = Subset.TRAIN,
    ):
        self.graph = graph
        self.forcing = forcing
        self.scaling = scaling or ScalingSet.from_forcing(forcing)
        self.init = _init_vector(init_states)
        self.labels = np.asarray(getattr(masks, "labels", masks))
        if len(self.labels) != len(forcing):
            raise ValueError("mask length does not match forcing length")
        self.train = self.train_mask(target)
        self.off, self.kind = compile_graph(graph)
        self._sc = self.scaling.vector()
        self._u = np.ascontiguousarray(forcing.precip)
        self._pe = np.ascontiguousarray(forcing.pet)

    def train_mask(self, subset: Subset) -> np.ndarray:
        m = (self.labels == subset) & (np.arange(len(self.labels)) >= self.forcing.spinup_len)
        if not m.any():
            raise ValueError(f"no {subset.name} steps")
        if np.isnan(self.forcing.q_obs[m]).any():
            raise ValueError(f"observed streamflow missing on {subset.name} steps")
        return m

    def streamflow(self, params) -> np.ndarray:
        p = _as_vector(self.graph, params)
        return K.streamflow(p, self.off, self.kind, self._sc, self._u, self._pe, self.init)

    def loss(self, params) -> float:
        q = self.streamflow(params)
        if not np.all(np.isfinite(q)):
            raise NonFiniteLoss("simulated streamflow is not finite")
        return 1.0 - kge(q[self.train], self.forcing.q_obs[self.train]).kge

    def loss_and_grad(self, params) -> tuple[float, np.ndarray]:
        p = _as_vector(self.graph, params)
        states, _, _, q, _ = K.forward(p, self.off, self.kind, self._sc, self._u, self._pe, self.init)
        try:
            check_finite(self.graph, states)
        except FloatingPointError as exc:
            raise NonFiniteLoss(str(exc)) from exc
        value, g_sim = kge_loss_grad(q[self.train], self.forcing.q_obs[self.train])
        qbar = np.zeros(len(q))
        qbar[self.train] = g_sim
        grad = K.backward(p, self.off, self.kind, self._sc, self._u, self._pe, states, qbar)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("gradient is not finite")
        return value, grad

    def score(self, params, subset: Subset = Subset.SELECT) -> float:
        m = self.train_mask(subset)
        q = self.streamflow(params)
        return kge(q[m], self.forcing.q_obs[m]).kge_ss


def loss_eval(spec, params, forcing, masks, scaling=None, init_states=None) -> float:
    """``1 - KGE`` on the Train steps."""
    return Problem(spec, forcing, masks, scaling, init_states).loss(params)


def gradient(spec, params, forcing, masks, scaling=None, init_states=None) -> np.ndarray:
    """Reverse-mode gradient of :func:`loss_eval` with respect to the raw parameters."""
    return Problem(spec, forcing, masks, scaling, init_states).loss_and_grad(params)[1]


def finite_difference_gradient(fun, params, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |p|)``."""
    p = np.asarray(params, dtype=float)
    g = np.empty_like(p)
    for i in range(len(p)):
        h = rel_step * (1.0 + abs(p[i]))
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fun(up) - fun(dn)) / (2.0 * h)
    return g


@dataclass
class TrainRun:
    seed: int
    graph: GraphSpec
    config: TrainConfig
    initial: np.ndarray
    final: np.ndarray
    loss_history: list
    select_score: float
    scaling: ScalingSet
    init_states: np.ndarray
    wall_time: float = 0.0
    inherited: np.ndarray | None = None
    error: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def block(self) -> ParamBlock:
        return ParamBlock(self.graph, self.final.copy())

    def to_dict(self) -> dict:
        return {
            "tool_version": TOOL_VERSION,
            "seed": self.seed,
            "graph": self.graph.to_dict(),
            "config": self.config.to_dict(),
            "scaling": self.scaling.to_dict(),
            "init_states": dict(zip(NODES, map(float, self.init_states))),
            "initial_raw": [float(v) for v in self.initial],
            "final_raw": [float(v) for v in self.final],
            "final_constrained": ParamBlock(self.graph, self.final).constrained() if self.ok else None,
            "inherited_slots": None if self.inherited is None else [bool(b) for b in self.inherited],
            "loss_history": [float(v) for v in self.loss_history],
            "select_kge_ss": self.select_score,
            "wall_time": self.wall_time,
            "error": self.error,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, default=_float17) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> TrainRun:
        graph = GraphSpec.from_dict(d["graph"])
        inh = d.get("inherited_slots")
        return cls(
            d["seed"],
            graph,
            TrainConfig(**d["config"]),
            np.array(d["initial_raw"], dtype=float),
            np.array(d["final_raw"], dtype=float),
            list(d["loss_history"]),
            d["select_kge_ss"],
            ScalingSet.from_dict(d["scaling"]),
            np.array([d["init_states"][n] for n in NODES], dtype=float),
            d.get("wall_time", 0.0),
            None if inh is None else np.array(inh, dtype=bool),
            d.get("error"),
            d.get("meta", {}),
        )

    @classmethod
    def load(cls, path) -> TrainRun:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _float17(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def train(problem: Problem, initial: ParamBlock | np.ndarray, config: TrainConfig, seed: int = 0) -> TrainRun:
    """Full-batch ADAM on one initialization; returns the final parameters."""
    t0 = time.perf_counter()
    p0 = _as_vector(problem.graph, initial)
    inherited = initial.inherited if isinstance(initial, ParamBlock) else None
    p = p0.copy()
    state = AdamState.zeros(len(p))
    history = []
    best_sel, best_p, stale = -np.inf, p.copy(), 0
    error = None
    try:
        for epoch in range(1, config.epochs + 1):
            value, grad = problem.loss_and_grad(p)
            history.append(value)
            if config.grad_clip is not None:
                norm = np.linalg.norm(grad)
                if norm > config.grad_clip:
                    grad = grad * (config.grad_clip / norm)
            p, state = adam_step(state, p, grad, config.learning_rate(epoch), config.beta1, config.beta2, config.eps)
            if config.patience is not None:
                sel = problem.score(p)
                if sel > best_sel:
                    best_sel, best_p, stale = sel, p.copy(), 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        p = best_p
                        break
        select = problem.score(p)
        if not np.isfinite(select):
            raise NonFiniteLoss("selection score is not finite")
    except (FloatingPointError, DegenerateObserved) as exc:
        error = f"{type(exc).__name__}: {exc}"
        select = -np.inf
        log.warning("seed %d failed: %s", seed, error)
    return TrainRun(
        seed,
        problem.graph,
        config,
        p0,
        p,
        history,
        float(select),
        problem.scaling,
        problem.init.copy(),
        time.perf_counter() - t0,
        inherited,
        error,
    )


def _sources(lineage) -> list[tuple]:
    """Normalize lineage entries to ``(graph, raw_values, nodes)``.

    Entries may be TrainRun objects, ``(TrainRun, nodes)`` pairs or
    ``(graph, params, nodes)`` triples.
    """
    out = []
    for item in lineage:
        if isinstance(item, TrainRun):
            out.append((item.graph, item.final, None))
        elif len(item) == 2 and isinstance(item[0], TrainRun):
            out.append((item[0].graph, item[0].final, item[1]))
        else:
            out.append(tuple(item) if len(item) == 3 else (item[0], item[1], None))
    return out


def initial_block(spec: GraphSpec, seed: int, lineage=None) -> ParamBlock:
    """Fresh or inherited starting parameters for one seed."""
    if not lineage:
        return init_params(spec, seed)
    return inherit_composite(spec, _sources(lineage), seed)


def _train_seed(args):
    problem, spec, seed, lineage, config = args
    return train(problem, initial_block(spec, seed, lineage), config, seed)


def select_best(runs: list[TrainRun]) -> TrainRun:
    """Highest Select-mask KGE_ss; ties go to the lower seed."""
    ok = [r for r in runs if r.ok]
    if not ok:
        raise AllRunsFailed("; ".join(r.error or "" for r in runs))
    best = ok[0]
    for r in ok[1:]:
        if r.select_score > best.select_score or (r.select_score == best.select_score and r.seed < best.seed):
            best = r
    return best


def train_multi_seed(
    spec: GraphSpec,
    forcing: ForcingSeries,
    masks: SubsetMask,
    config: TrainConfig = TrainConfig(),
    scaling: ScalingSet | None = None,
    init_states=None,
    lineage=None,
    seed_base: int = 0,
    n_jobs: int = 1,
) -> tuple[TrainRun, list[TrainRun]]:
    """Train ``config.seeds`` initializations and keep the best on Select.

    Inherited slots are shared by every seed; only fresh slots vary.
    """
    problem = Problem(spec, forcing, masks, scaling, init_states)
    seeds = [seed_base + i for i in range(config.seeds)]
    jobs = [(problem, spec, s, lineage, config) for s in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            runs = list(ex.map(_train_seed, jobs))
    else:
        runs = [_train_seed(j) for j in jobs]
    return select_best(runs), runs


def state_scaling(states: np.ndarray, node: str) -> tuple[float, float]:
    mean = float(np.mean(states))
    std = float(np.std(states))
    if not std > 0:
        warnings.warn(f"{node} state is constant; using std = 1", DegenerateState, stacklevel=2)
        std = 1.0
    return mean, std


def preliminary_stage(
    spec: GraphSpec,
    forcing: ForcingSeries,
    masks: SubsetMask,
    config: TrainConfig = TrainConfig(),
    base_scaling: ScalingSet | None = None,
    seed: int = 0,
) -> tuple[ScalingSet, dict, TrainRun]:
    """Scaling factors and initial states from a constant-gate clone of ``spec``.

    The clone is trained once, then simulated; each node's state mean and
    standard deviation over the native record become its scaling factors.
    The groundwater store starts at the first observed flow divided by the
    learned constant groundwater gate; every other store starts empty. When
    ``base_scaling`` is given its soil-moisture factors are kept.
    """
    clone = build(spec.arch_id, gating="constant")
    scaling = ScalingSet.from_forcing(forcing)
    problem = Problem(clone, forcing, masks, scaling)
    run = train(problem, init_params(clone, seed), TrainConfig(**{**config.to_dict(), "seeds": 1}), seed)
    if not run.ok:
        raise AllRunsFailed(f"preliminary stage failed: {run.error}")
    trace = simulate(clone, run.final, forcing, None, scaling)
    native = slice(forcing.spinup_len, None)
    for node in clone.nodes:
        mean, std = state_scaling(trace.state(node.name)[native], node.name)
        scaling = scaling.with_state(node.name, mean, std)
    if base_scaling is not None:
        scaling = scaling.with_state("soil", *base_scaling.state["soil"])
    init = {n: 0.0 for n in NODES}
    if clone.has("groundwater"):
        k_gw = logistic(run.final[clone.slot("groundwater", "out")][0])
        init["groundwater"] = groundwater_initial_state(forcing, k_gw)
    return scaling, init, run


def groundwater_initial_state(forcing: ForcingSeries, k_gw: float) -> float:
    """First observed native flow over the constant groundwater release rate."""
    q = forcing.q_obs[forcing.native_slice]
    q0 = q[~np.isnan(q)][0]
    return float(q0 / k_gw)


def stage_setup(
    spec: GraphSpec,
    forcing: ForcingSeries,
    masks: SubsetMask,
    config: TrainConfig = TrainConfig(),
    lineage=None,
    seed: int = 0,
) -> tuple[ScalingSet, dict, TrainRun | None]:
    """Scaling and initial states for training ``spec``.

    Nodes inherited from a parent run keep that run's scaling factors and
    initial state, so copied parameters act on identically scaled inputs.
    A preliminary constant-gate stage runs only when some node is new.
    """
    parents = []
    for item in lineage or ():
        run, nodes = (item, None) if isinstance(item, TrainRun) else (item[0], item[1])
        if not isinstance(run, TrainRun):
            raise TypeError("stage_setup lineage entries must reference TrainRun objects")
        if nodes is None:
            nodes = _allowed_parents(spec).get(run.graph.name) or tuple(n.name for n in run.graph.nodes)
        parents.append((run, nodes))
    covered = {n for _, nodes in parents for n in nodes}
    needed = {n.name for n in spec.nodes}
    prelim = None
    if needed <= covered:
        scaling = parents[0][0].scaling
        init = {n: 0.0 for n in NODES}
    else:
        scaling, init, prelim = preliminary_stage(spec, forcing, masks, config, seed=seed)
    for run, nodes in parents:
        for n in nodes:
            if n in run.scaling.state:
                scaling = scaling.with_state(n, *run.scaling.state[n])
            init[n] = float(run.init_states[NODES.index(n)])
    return scaling, init, prelim
