"""Training runs with KL probes, ablation grids and full-flow simulations."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..attention import ModelParams, attention_summary, conditional_entropy, cross_entropy, forward_tokens, targets_of
from ..errors import ConfigError, NumericError
from ..flow import FlowState, FlowSystem, build_ground_truth, feature_residuals, noisy_uniform_init
from ..integrate import Controls, Trajectory, integrate_system
from ..logs import MetricLog
from ..markov import TaskSpec, make_rng, sample_batch
from ..theory import feature_crossing_times
from ..training import train
from .config import AblationBlock, ExperimentConfig
from .probes import ReferencePredictions, StageReport, detect_stages, probe_restricted_model

log = logging.getLogger(__name__)


def metric_columns(cfg: ExperimentConfig) -> list[str]:
    h, w = cfg.task.h, cfg.task.w
    cols = ["step", "train_loss", "val_loss", "excess_loss"]
    cols += [f"kl_gt_{i}" for i in cfg.predictor_indices()]
    cols += [f"kl_model_c{c}" for c in cfg.probes.restricted_contexts]
    cols += [f"attn_h{k}_lag{j}" for k in range(h) for j in range(w)]
    cols += ["lr"]
    return cols


@dataclass
class Datasets:
    train: np.ndarray
    test: np.ndarray
    probe: np.ndarray


def make_datasets(spec: TaskSpec, cfg: ExperimentConfig) -> Datasets:
    """Train, test and probe batches from independent streams of the run seed."""
    seed = cfg.seed
    train_set = sample_batch(spec, cfg.data.train, make_rng(seed, "train"))
    test_set = sample_batch(spec, cfg.data.test, make_rng(seed, "test"))
    if cfg.probes.batch <= len(test_set):
        probe = test_set[:cfg.probes.batch]
    else:
        probe = sample_batch(spec, cfg.probes.batch, make_rng(seed, "probe"))
    return Datasets(train_set, test_set, probe)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    spec: TaskSpec
    log: MetricLog
    params: ModelParams
    stages: StageReport
    references: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)

    def summary(self) -> dict:
        val = self.log.column("val_loss")
        best = int(np.argmin(val))
        return {"best_val_loss": float(val[best]), "best_step": int(self.log.column("step")[best]),
                "final_val_loss": float(val[-1]), "stage_count": self.stages.stage_count,
                "crossings": self.stages.to_dict()["series"]}


def train_references(spec: TaskSpec, cfg: ExperimentConfig, data: Datasets) -> dict:
    """Context-restricted reference models: same seed and hyperparameters, only the limit differs."""
    refs = {}
    for c in cfg.probes.restricted_contexts:
        result = train(spec, data.train, data.test, cfg.train_config(), make_rng(cfg.seed, "init"),
                       context_limit=int(c))
        refs[int(c)] = result.params
    return refs


def run_experiment(cfg: ExperimentConfig, references: dict | None = None, data: Datasets | None = None,
                   keep_snapshots: bool = False) -> ExperimentResult:
    """Train the attention model and probe it every ``probes.stride`` steps.

    Missing context-restricted references are trained first.
    """
    spec = cfg.build_task()
    data = data or make_datasets(spec, cfg)
    references = dict(references or {})
    missing = [c for c in cfg.probes.restricted_contexts if int(c) not in references]
    if missing:
        sub = cfg.replace(**{"probes.restricted_contexts": missing})
        references.update(train_references(spec, sub, data))
    gt_tables = ReferencePredictions(spec, data.probe, cfg.predictor_indices())
    probe_entropy = conditional_entropy(spec, data.probe)
    probe_targets = targets_of(data.probe, spec.w)
    columns = metric_columns(cfg)
    metric_log = MetricLog(columns)

    def probe(step, params, row):
        cache = forward_tokens(params, data.probe)
        out = {"excess_loss": cross_entropy(cache, probe_targets) - probe_entropy}
        for i, value in gt_tables.kl(cache.predictions).items():
            out[f"kl_gt_{i}"] = value
        for c, value in probe_restricted_model(params, data.probe, references).items():
            out[f"kl_model_c{c}"] = value
        mass = attention_summary(params, data.probe)
        for k in range(mass.shape[0]):
            for j in range(mass.shape[1]):
                out[f"attn_h{k}_lag{j}"] = float(mass[k, j])
        metric_log.append({**row, **out})
        return out

    result = train(spec, data.train, data.test, cfg.train_config(), make_rng(cfg.seed, "init"),
                   callback=probe, context_limit=cfg.model.context_limit, keep_snapshots=keep_snapshots)
    steps = metric_log.column("step")
    series = {f"kl_gt_{i}": metric_log.column(f"kl_gt_{i}") for i in cfg.predictor_indices()}
    stages = detect_stages(steps, series, cfg.probes.threshold)
    return ExperimentResult(cfg, spec, metric_log, result.params, stages, references, result.snapshots)


AXIS_PATHS = {"init_scale": "model.init_scale", "m": "task.m", "train": "data.train",
              "optimizer": "optim.optimizer", "online": "data.online"}


def ablation_cells(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """(cell name, dotted overrides) for the declared grid."""
    block: AblationBlock = cfg.ablation
    axes = [(a, list(getattr(block, a))) for a in AblationBlock.AXES if getattr(block, a)]
    cells = []
    if block.mode == "sweep":
        for axis, values in axes:
            for v in values:
                cells.append((f"{axis}={v}", {AXIS_PATHS[axis]: v}))
    else:
        for combo in itertools.product(*[values for _, values in axes]):
            name = ",".join(f"{a}={v}" for (a, _), v in zip(axes, combo))
            cells.append((name, {AXIS_PATHS[a]: v for (a, _), v in zip(axes, combo)}))
    if not cells:
        raise ConfigError("the ablation grid declares no values")
    return cells


@dataclass
class CellResult:
    name: str
    overrides: dict
    status: str
    summary: dict = field(default_factory=dict)
    log: MetricLog | None = None
    error: str = ""


def run_cell(cfg: ExperimentConfig, name: str, overrides: dict) -> CellResult:
    try:
        result = run_experiment(cfg.replace(**overrides))
    except (NumericError, FloatingPointError) as exc:
        log.warning("ablation cell %s aborted: %s", name, exc)
        return CellResult(name, overrides, "failed", error=str(exc))
    return CellResult(name, overrides, "ok", result.summary(), result.log)


def _run_cell_args(args):
    return run_cell(*args)


def run_ablation(cfg: ExperimentConfig, threads: int = 1) -> list[CellResult]:
    """Run every grid cell; an aborted cell is marked failed and the others proceed."""
    jobs = [(cfg, name, overrides) for name, overrides in ablation_cells(cfg)]
    if threads <= 1 or len(jobs) == 1:
        return [run_cell(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_cell_args, jobs))


def ablation_table(cells: list[CellResult]) -> list[dict]:
    rows = []
    for cell in cells:
        rows.append({"cell": cell.name, "status": cell.status,
                     "best_val_loss": cell.summary.get("best_val_loss", float("nan")),
                     "best_step": cell.summary.get("best_step", -1),
                     "stage_count": cell.summary.get("stage_count", -1)})
    return rows


@dataclass
class FlowRun:
    trajectory: Trajectory
    residuals: MetricLog
    crossings: list

    @property
    def ordered(self) -> bool:
        c = self.crossings
        return all(x is not None for x in c) and all(a < b for a, b in zip(c, c[1:]))


def simulate_flow(cfg: ExperimentConfig, backend: str = "compiled") -> FlowRun:
    """Full h-head flow from V = 0 and noisy uniform attention.

    Records the per-feature residual 1/2 <G - P, V_j* (x) s_j*>^2 at every
    logged step and the times at which each drops below ``stage_fraction``
    of its start.
    """
    f = cfg.flow
    gt = build_ground_truth(f.d, f.T, f.h, f.m, f.b0, make_rng(cfg.seed, "flow", "ground_truth"))
    V0, S0, _ = noisy_uniform_init(gt, f.h, f.noise, make_rng(cfg.seed, "flow", "noise"))
    residuals = MetricLog(["t"] + [f"residual_{j}" for j in range(f.h)])

    def observe(t, V, S):
        values = feature_residuals(FlowState(V, S), gt)
        residuals.append({"t": t, **{f"residual_{j}": float(v) for j, v in enumerate(values)}})

    controls = Controls(dt=f.dt, log_every=f.log_every, stop_tol=0.0, backend=backend, keep_states=False)
    traj = integrate_system(FlowSystem("full", gt, f.h), V0, S0, f.t_end, controls, observer=observe)
    table = np.array(residuals.rows)[:, 1:]
    crossings = feature_crossing_times(residuals.column("t"), table, f.stage_fraction)
    return FlowRun(traj, residuals, crossings)
