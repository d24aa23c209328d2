"""Command-line runner: ingest, train, evaluate, simulate, report, campaign.

Every command reads an optional JSON config; each config field can be
overridden by a flag. Outputs go under ``--output``, else the directory named
by ``MCPGRAPH_OUTPUT``, else ``./mcp_runs``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .architectures import ARCH_IDS, LINEAGE, GraphSpec, build
from .core import simulate
from .forcing import (
    ForcingError,
    ForcingSeries,
    Subset,
    SubsetMask,
    build_spinup,
    flow_groups,
    load_forcing,
    read_labels,
    split_timesteps,
    write_labels,
)
from .metrics import DiagnosticReport, annual_kge_ss, aux_metrics, group_metrics, kge
from .training import TOOL_VERSION, TrainConfig, TrainRun, stage_setup, train_multi_seed

log = logging.getLogger("mcpgraph")

OUTPUT_ENV = "MCPGRAPH_OUTPUT"
LOG_FLOOR = 1e-3  # mm/day; flows below this are clipped in log-space series


class MissingLineage(FileNotFoundError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    forcing: str | None = None
    column_map: dict = field(default_factory=dict)
    delimiter: str | None = None
    spinup_repeats: int = 3
    split_seed: int = 0
    arch: str = "MA1"
    bypass: str | None = None
    mass_relax: bool = False
    gating: str = "sigmoid"
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    lineage: list = field(default_factory=list)  # "path/to/run.json[:node,node]"
    output: str | None = None
    seed_base: int = 0
    jobs: int = 1
    name: str | None = None
    run: str | None = None
    variants: list = field(default_factory=lambda: ["BP1", "BP2", "MR"])

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def graph(self) -> GraphSpec:
        return build(self.arch, bypass=self.bypass, mass_relax=self.mass_relax, gating=self.gating)

    def out_dir(self) -> Path:
        return Path(self.output or os.environ.get(OUTPUT_ENV) or "mcp_runs")

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"tool_version": TOOL_VERSION, "config_hash": cfg.hash()}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else f"{v:.17g}"


# ----------------------------------------------------------------------------
# ingest


def _ingest_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir() / "ingest"


def write_forcing(path: Path, series: ForcingSeries, header: str = "") -> None:
    """Native rows in the default column layout, 17 significant digits."""
    native = series.native()
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh)
        w.writerow(["date", "precip_mm", "pet_mm", "q_mm"])
        for d, p, e, q in zip(native.dates, native.precip, native.pet, native.q_obs):
            w.writerow([str(d), _fmt(p), _fmt(e), _fmt(q)])


def cmd_ingest(cfg: ExperimentConfig) -> dict:
    if not cfg.forcing:
        raise ValueError("no forcing file given")
    raw = load_forcing(cfg.forcing, cfg.column_map or None, cfg.delimiter)
    series = build_spinup(raw, cfg.spinup_repeats)
    masks = split_timesteps(series, seed=cfg.split_seed)
    groups = flow_groups(series)
    out = _ingest_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    write_forcing(out / "forcing.csv", series, f"# config_hash={stamp['config_hash']}\n")
    write_labels(out / "labels.txt", masks.labels, series.spinup_len)
    (out / "groups.txt").write_text("".join(f"{int(g)}\n" for g in groups.group[series.spinup_len :]))
    counts = masks.counts
    summary = {
        **stamp,
        "source": str(cfg.forcing),
        "n_steps": series.native_len,
        "spinup_steps": series.spinup_len,
        "spinup_repeats": cfg.spinup_repeats,
        "water_years": [int(y) for y in series.native_years()],
        "split": {s.name.capitalize(): counts[s] for s in (Subset.TRAIN, Subset.SELECT, Subset.TEST)},
        "year_labels": {str(y): Subset(v).name.capitalize() for y, v in sorted(masks.year_labels.items())},
        "flow_groups": {
            "counts": [int(np.sum(groups.group == k)) for k in range(1, groups.n_groups + 1)],
            "thresholds": groups.thresholds,
            "ranges": groups.ranges,
        },
        "missing_q": int(series.q_missing[series.native_slice].sum()),
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "config.json", cfg.to_dict())
    log.info("ingested %d steps: %s", series.native_len, summary["split"])
    return summary


def load_ingest(cfg: ExperimentConfig) -> tuple[ForcingSeries, SubsetMask, np.ndarray]:
    d = _ingest_dir(cfg)
    if not (d / "forcing.csv").exists():
        raise MissingArtifact(f"{d} has no ingest artifacts; run `ingest` first")
    summary = json.loads((d / "summary.json").read_text())
    series = build_spinup(load_forcing(d / "forcing.csv"), summary["spinup_repeats"])
    pad = np.zeros(series.spinup_len, dtype=np.int8)
    labels = np.concatenate([pad, read_labels(d / "labels.txt")])
    groups = np.concatenate([pad, np.loadtxt(d / "groups.txt", dtype=np.int8, ndmin=1)])
    year_labels = {int(y): Subset[v.upper()] for y, v in summary["year_labels"].items()}
    return series, SubsetMask(labels, year_labels), groups


# ----------------------------------------------------------------------------
# train


def parse_lineage(refs) -> list[tuple[TrainRun, tuple | None]]:
    out = []
    for ref in refs:
        path, _, nodes = str(ref).partition(":")
        p = Path(path)
        if p.is_dir():
            p = _selected_run_path(p)
        if not p.exists():
            raise MissingLineage(f"lineage run {p} does not exist")
        out.append((TrainRun.load(p), tuple(nodes.split(",")) if nodes else None))
    return out


def _selected_run_path(run_dir: Path) -> Path:
    marker = run_dir / "selected.json"
    if not marker.exists():
        raise MissingLineage(f"{run_dir} has no selection marker")
    return run_dir / json.loads(marker.read_text())["file"]


def _run_dir(cfg: ExperimentConfig, graph: GraphSpec) -> Path:
    return cfg.out_dir() / "runs" / (cfg.name or graph.name)


def cmd_train(cfg: ExperimentConfig) -> Path:
    series, masks, _ = load_ingest(cfg)
    graph = cfg.graph()
    tcfg = cfg.train_config()
    lineage = parse_lineage(cfg.lineage)
    out = _run_dir(cfg, graph)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    scaling, init, prelim = stage_setup(graph, series, masks, tcfg, lineage, seed=cfg.seed_base)
    if prelim is not None:
        prelim.meta.update(stamp, role="preliminary")
        (out / "preliminary").mkdir(exist_ok=True)
        prelim.save(out / "preliminary" / "run.json")
    best, runs = train_multi_seed(
        graph, series, masks, tcfg, scaling, init, lineage or None, cfg.seed_base, cfg.jobs
    )
    for r in runs:
        r.meta.update(stamp, lineage=[str(x) for x in cfg.lineage])
        r.save(out / f"seed_{r.seed:03d}.json")
    _write_json(
        out / "selected.json",
        {
            **stamp,
            "graph": graph.name,
            "selected_seed": best.seed,
            "file": f"seed_{best.seed:03d}.json",
            "select_kge_ss": best.select_score,
            "scores": {str(r.seed): r.select_score for r in runs},
            "inherited_slots": None if best.inherited is None else int(best.inherited.sum()),
            "fresh_slots": None if best.inherited is None else int((~best.inherited).sum()),
        },
    )
    _write_json(out / "config.json", cfg.to_dict())
    log.info("%s: selected seed %d (Select KGE_ss %.4f)", graph.name, best.seed, best.select_score)
    return out


# ----------------------------------------------------------------------------
# simulate / evaluate


def _load_run(cfg: ExperimentConfig) -> tuple[TrainRun, Path]:
    if not cfg.run:
        raise ValueError("no run given")
    p = Path(cfg.run)
    if p.is_dir():
        p = _selected_run_path(p)
    if not p.exists():
        raise MissingArtifact(f"run file {p} does not exist")
    return TrainRun.load(p), p


def _eval_dir(cfg: ExperimentConfig, run: TrainRun) -> Path:
    return cfg.out_dir() / "eval" / (cfg.name or run.graph.name)


def cmd_simulate(cfg: ExperimentConfig) -> Path:
    run, _ = _load_run(cfg)
    if cfg.forcing:
        series = build_spinup(load_forcing(cfg.forcing, cfg.column_map or None, cfg.delimiter), cfg.spinup_repeats)
    else:
        series, _, _ = load_ingest(cfg)
    trace = simulate(run.graph, run.final, series, run.init_states, run.scaling)
    out = _eval_dir(cfg, run)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    return out / "trace.csv"


def peak_years(q_obs: np.ndarray, water_years: np.ndarray) -> dict[str, int]:
    """Driest, median and wettest water year ranked by annual peak flow.

    With an even number of years the lower of the two middle years is the
    median.
    """
    years = np.unique(water_years)
    peaks = np.array([np.nanmax(q_obs[water_years == y]) for y in years])
    order = np.argsort(peaks, kind="stable")
    return {
        "driest": int(years[order[0]]),
        "median": int(years[order[(len(years) - 1) // 2]]),
        "wettest": int(years[order[-1]]),
    }


def write_hydrographs(out: Path, series: ForcingSeries, sim: np.ndarray, stamp: dict) -> dict:
    native = series.native_slice
    wy = series.water_year[native]
    q_obs = series.q_obs[native]
    q_sim = sim[native]
    dates = series.dates[native]
    picked = peak_years(q_obs, wy)
    for label, year in picked.items():
        m = wy == year
        for space in ("linear", "log"):
            o, s = q_obs[m], q_sim[m]
            if space == "log":
                o = np.log10(np.maximum(o, LOG_FLOOR))
                s = np.log10(np.maximum(s, LOG_FLOOR))
            with open(out / f"hydrograph_{label}_{space}.csv", "w", newline="") as fh:
                fh.write(f"# config_hash={stamp['config_hash']} tool_version={stamp['tool_version']} water_year={year}\n")
                w = csv.writer(fh)
                w.writerow(["date", "q_obs" if space == "linear" else "log10_q_obs", "q_sim" if space == "linear" else "log10_q_sim"])
                for d, a, b in zip(dates[m], o, s):
                    w.writerow([str(d), _fmt(a), _fmt(b)])
    return picked


def diagnose(run: TrainRun, series: ForcingSeries, masks: SubsetMask, groups: np.ndarray, meta: dict) -> tuple:
    trace = simulate(run.graph, run.final, series, run.init_states, run.scaling)
    q = trace.streamflow
    native = np.arange(len(series)) >= series.spinup_len
    overall, aux = {}, {}
    subsets = {
        "Train": masks.labels == Subset.TRAIN,
        "Select": masks.labels == Subset.SELECT,
        "Test": masks.labels == Subset.TEST,
        "All": native,
    }
    for name, m in subsets.items():
        m = m & native & ~np.isnan(series.q_obs)
        overall[name] = kge(q[m], series.q_obs[m])
        nse, rmse, mae = aux_metrics(q[m], series.q_obs[m])
        aux[name] = {"NSE": nse, "RMSE": rmse, "MAE": mae}
    ok = native & ~np.isnan(series.q_obs)
    annual = annual_kge_ss(q[ok], series.q_obs[ok], series.water_year[ok])
    grp = group_metrics(q[ok], series.q_obs[ok], groups[ok])
    meta = {**meta, "graph": run.graph.name, "seed": run.seed, "n_rescaled": trace.n_rescaled, "trace_hash": trace.config_hash}
    return DiagnosticReport(overall, annual, grp, aux, meta), trace


def cmd_evaluate(cfg: ExperimentConfig, plots: bool = False) -> Path:
    run, path = _load_run(cfg)
    series, masks, groups = load_ingest(cfg)
    stamp = _stamp(cfg)
    report, trace = diagnose(run, series, masks, groups, {**stamp, "run": str(path)})
    out = _eval_dir(cfg, run)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(f"# {run.graph.name} config_hash={stamp['config_hash']}\n" + report.format_tables())
    picked = write_hydrographs(out, series, trace.streamflow, stamp)
    if plots:
        _plot_hydrographs(out, picked)
    return out


def _plot_hydrographs(out: Path, picked: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(picked), 2, figsize=(10, 3 * len(picked)), squeeze=False)
    for row, (label, year) in enumerate(picked.items()):
        for col, space in enumerate(("linear", "log")):
            data = np.genfromtxt(out / f"hydrograph_{label}_{space}.csv", delimiter=",", skip_header=2, usecols=(1, 2))
            ax = axes[row, col]
            ax.plot(data[:, 0], "o", ms=2, color="tab:red", label="observed")
            ax.plot(data[:, 1], "-", color="k", lw=1, label="simulated")
            ax.set_title(f"WY {year} ({label}, {space})")
    axes[0, 0].legend()
    fig.tight_layout()
    fig.savefig(out / "hydrographs.svg")
    plt.close(fig)


# ----------------------------------------------------------------------------
# report


def cmd_report(cfg: ExperimentConfig, reports: list[str]) -> Path:
    """Side-by-side annual KGE_ss percentiles for several evaluated runs."""
    paths = [Path(p) for p in reports] or sorted((cfg.out_dir() / "eval").glob("*/report.json"))
    if not paths:
        raise MissingArtifact("no report.json files to summarize")
    rows = []
    for p in paths:
        if p.is_dir():
            p = p / "report.json"
        d = json.loads(p.read_text())
        rows.append((d["meta"].get("graph", p.parent.name), d))
    labels = ("worst", "5%", "25%", "50%", "75%", "95%")
    lines = [f"{'':12s}" + "".join(f"{name:>12s}" for name, _ in rows)]
    for lab in labels:
        lines.append(f"{'KGE_ss ' + lab:12s}" + "".join(f"{d['annual']['percentiles'][lab]['kge_ss']:12.3f}" for _, d in rows))
    for comp, key in (("alpha", "alpha"), ("beta", "beta"), ("gamma", "rho")):
        lines.append(f"{comp + ' (All)':12s}" + "".join(f"{d['overall']['All'][key]:12.3f}" for _, d in rows))
    out = cfg.out_dir() / "report"
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    (out / "summary.txt").write_text(f"# config_hash={stamp['config_hash']}\n" + "\n".join(lines) + "\n")
    _write_json(
        out / "summary.json",
        {**stamp, "models": {name: d["annual"]["percentiles"] for name, d in rows}, "sources": [str(p) for p in paths]},
    )
    return out


# ----------------------------------------------------------------------------
# campaign


def campaign_manifest(variants=("BP1", "BP2", "MR")) -> dict[str, list[tuple[str, tuple | None]]]:
    """Stage name -> list of (parent stage, inherited nodes)."""
    manifest: dict[str, list] = {"MA1": []}
    for arch in ARCH_IDS[1:]:
        manifest[arch] = [(p, nodes) for p, nodes in LINEAGE[arch]]
    for arch in ARCH_IDS:
        for v in variants:
            if v == "MR":
                try:
                    g = build(arch, mass_relax=True)
                except ValueError:
                    continue
            else:
                g = build(arch, bypass=v)
            manifest[g.name] = [(arch, None)]
    return manifest


def _levels(manifest: dict) -> list[list[str]]:
    done, levels = set(), []
    while len(done) < len(manifest):
        ready = [k for k, deps in manifest.items() if k not in done and all(p in done for p, _ in deps)]
        if not ready:
            raise ValueError("lineage manifest has a cycle")
        levels.append(ready)
        done.update(ready)
    return levels


def _stage_config(cfg: ExperimentConfig, stage: str, deps) -> ExperimentConfig:
    arch, bypass, mr = stage[:3], None, False
    rest = stage[3:]
    if rest.startswith("BP"):
        bypass = rest[:3]
    elif rest == "MR":
        mr = True
    runs = cfg.out_dir() / "runs"
    lineage = [str(runs / p) + (":" + ",".join(nodes) if nodes else "") for p, nodes in deps]
    return replace(cfg, arch=arch, bypass=bypass, mass_relax=mr, lineage=lineage, name=stage, jobs=1)


def cmd_campaign(cfg: ExperimentConfig, stages: list[str] | None = None) -> list[Path]:
    """Train the lineage manifest in dependency order.

    Stages on the same dependency level are independent and run in parallel
    when ``jobs > 1``.
    """
    manifest = campaign_manifest(cfg.variants)
    if stages:
        keep = set()
        todo = list(stages)
        while todo:
            s = todo.pop()
            if s not in manifest:
                raise ValueError(f"unknown stage {s}")
            if s not in keep:
                keep.add(s)
                todo.extend(p for p, _ in manifest[s])
        manifest = {k: v for k, v in manifest.items() if k in keep}
    done = []
    for level in _levels(manifest):
        cfgs = [_stage_config(cfg, s, manifest[s]) for s in level]
        if cfg.jobs > 1 and len(cfgs) > 1:
            with ProcessPoolExecutor(min(cfg.jobs, len(cfgs))) as ex:
                done += list(ex.map(cmd_train, cfgs))
        else:
            done += [cmd_train(c) for c in cfgs]
    return done


# ----------------------------------------------------------------------------
# argument handling


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcpgraph", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--output", help=f"output root (default ${OUTPUT_ENV} or ./mcp_runs)")
        p.add_argument("--name", help="subdirectory name for this run")

    def forcing(p):
        p.add_argument("--forcing", help="daily forcing file")
        p.add_argument("--column-map", nargs="*", metavar="FIELD=COLUMN", help="logical name (date, precip, pet, q_obs) to header, e.g. precip=P")
        p.add_argument("--delimiter")
        p.add_argument("--spinup-repeats", type=int)

    def arch(p):
        p.add_argument("--arch", choices=ARCH_IDS)
        p.add_argument("--bypass", choices=["BP1", "BP2", "none"])
        p.add_argument("--mass-relax", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--gating", choices=["sigmoid", "constant"])

    def training(p):
        for f in fields(TrainConfig):
            typ = int if f.type in ("int", "int | None") else float
            p.add_argument(f"--{f.name.replace('_', '-')}", type=typ, dest=f"train_{f.name}")
        p.add_argument("--lineage", nargs="*", help="parent run files or run directories, optionally :node,node")
        p.add_argument("--seed-base", type=int)
        p.add_argument("--jobs", type=int)

    p = sub.add_parser("ingest", help="load forcing, split years, build flow groups")
    common(p)
    forcing(p)
    p.add_argument("--split-seed", type=int)

    p = sub.add_parser("train", help="preliminary stage plus multi-seed training")
    common(p)
    arch(p)
    training(p)

    p = sub.add_parser("evaluate", help="diagnostic report, trace and hydrograph series for a run")
    common(p)
    p.add_argument("--run", help="run file or run directory (uses its selection marker)")
    p.add_argument("--plots", action="store_true", help="also write hydrographs.svg (needs matplotlib)")

    p = sub.add_parser("simulate", help="export the full trace of a trained run")
    common(p)
    forcing(p)
    p.add_argument("--run")

    p = sub.add_parser("report", help="compare evaluated runs")
    common(p)
    p.add_argument("reports", nargs="*", help="report.json files or evaluation directories")

    p = sub.add_parser("campaign", help="train the full lineage manifest in dependency order")
    common(p)
    training(p)
    p.add_argument("--stages", nargs="*", help="only these stages and their ancestors")
    p.add_argument("--variants", nargs="*", choices=["BP1", "BP2", "MR"])
    return ap


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    ns = vars(args)
    train = dict(cfg.train)
    for key, val in ns.items():
        if val is None or key in ("config", "command", "verbose", "plots", "reports", "stages"):
            continue
        if key.startswith("train_"):
            train[key[6:]] = val
        elif key == "column_map":
            cfg.column_map = {**cfg.column_map, **dict(kv.split("=", 1) for kv in val)}
        elif key == "bypass":
            cfg.bypass = None if val == "none" else val
        elif hasattr(cfg, key):
            setattr(cfg, key, val)
    cfg.train = train
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "ingest":
            summary = cmd_ingest(cfg)
            print(json.dumps({"n_steps": summary["n_steps"], "split": summary["split"]}))
        elif args.command == "train":
            print(cmd_train(cfg))
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.plots))
        elif args.command == "simulate":
            print(cmd_simulate(cfg))
        elif args.command == "report":
            print(cmd_report(cfg, args.reports))
        elif args.command == "campaign":
            for p in cmd_campaign(cfg, args.stages):
                print(p)
    except (ForcingError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
