"""Mass-conserving perceptron graphs for daily rainfall-runoff modelling."""

from .architectures import ARCH_IDS, GraphSpec, ParamBlock, all_variants, build, inherit_params, init_params, param_count
from .core import ScalingSet, SimTrace, node_step, simulate
from .forcing import (
    ForcingSeries,
    Subset,
    SubsetMask,
    build_spinup,
    flow_groups,
    from_arrays,
    load_forcing,
    split_timesteps,
)
from .gates import GateKind, GateSpec, gate_eval
from .metrics import DiagnosticReport, KgeComponents, annual_kge_ss, aux_metrics, group_metrics, kge
from .training import (
    TOOL_VERSION,
    TrainConfig,
    TrainRun,
    adam_step,
    gradient,
    loss_eval,
    preliminary_stage,
    stage_setup,
    train_multi_seed,
)

__version__ = TOOL_VERSION

__all__ = [
    "ARCH_IDS",
    "DiagnosticReport",
    "ForcingSeries",
    "GateKind",
    "GateSpec",
    "GraphSpec",
    "KgeComponents",
    "ParamBlock",
    "ScalingSet",
    "SimTrace",
    "Subset",
    "SubsetMask",
    "TrainConfig",
    "TrainRun",
    "adam_step",
    "all_variants",
    "annual_kge_ss",
    "aux_metrics",
    "build",
    "build_spinup",
    "flow_groups",
    "from_arrays",
    "gate_eval",
    "gradient",
    "group_metrics",
    "inherit_params",
    "init_params",
    "kge",
    "load_forcing",
    "loss_eval",
    "node_step",
    "param_count",
    "preliminary_stage",
    "simulate",
    "split_timesteps",
    "stage_setup",
    "train_multi_seed",
]
