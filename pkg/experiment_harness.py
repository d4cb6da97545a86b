#!/usr/bin/env python3
"""
Experiment orchestration for the three-stage active-learning scheme.

Stage 1 pretrains once on the unlabeled pool; then for every round the
network is fine-tuned on the labeled pool, evaluated on the held-out test
pool and, unless it is the last round, the configured selector picks K
unlabeled records whose labels are revealed. Every artifact (config
snapshot, checkpoints, histories, selections, round reports) lands in one
run directory that report() can aggregate.
"""

import asyncio
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, get_type_hints

import numpy as np
from dotenv import dotenv_values

from contrastive_training import (DEFAULT_ALPHA, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_MOMENTUM,
                                  DEFAULT_QUEUE_DEPTH, DEFAULT_TAU, KeyQueue, LossWeights, pretrain_stage1,
                                  train_stage2, write_history_csv)
from emitter_signals import (DEFAULT_AUGMENT_ANGLES, ChannelConfig, DatasetPools, IQRecord, generate_dataset,
                             load_iq_file, reveal_label, split_pools)
from query_selectors import (DEFAULT_MC_PASSES, STRATEGIES, CandidateScores, bald_scores, select_bald,
                             select_kcenter, select_random, write_selection_csv)
from sei_network import Architecture, NetworkParams, init_network, predict_proba, save_checkpoint
from utils import (ConfigurationError, ReportError, SelectionError, attach_run_log, named_stream, read_csv,
                   setup_logging, write_csv)

logger = logging.getLogger(__name__)

CONFIG_SNAPSHOT = "config.env"
SUMMARY_FILE = "summary.json"
ROUNDS_FILE = "rounds.csv"
CURVES_FILE = "curves.csv"
ALPHA_SWEEP_FILE = "alpha_sweep.csv"
ROUND_HEADER = ("round", "labeled_count", "test_accuracy", "per_class_accuracy", "selector", "wall_time")
MODES = ("pipeline", "baseline")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    """All knobs of one experiment; defaults are the desk-scale setup."""

    dataset: str = "synthetic"
    num_emitters: int = 4
    length: int = 256
    per_emitter: int = 64
    snr_db: float = 10.0
    channel_taps: int = 1
    test_fraction: float = 0.25
    initial_labeled: int = 16
    rounds: int = 4
    budget: int = 16
    strategy: str = "kcenter"
    pretrain_epochs: int = 20
    train_epochs: int = 100
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH_SIZE
    tau: float = DEFAULT_TAU
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    momentum: float = DEFAULT_MOMENTUM
    alpha: float = DEFAULT_ALPHA
    mc_passes: int = DEFAULT_MC_PASSES
    seed: Optional[int] = None
    mode: str = "pipeline"
    pretrain: bool = True
    include_contrastive: bool = True
    repretrain_each_round: bool = False
    cold_start: bool = False
    angles: Tuple[float, ...] = DEFAULT_AUGMENT_ANGLES

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Overlay string or typed values onto `base` (defaults when None)."""
        hints = get_type_hints(cls)
        values = asdict(base) if base is not None else {}
        for raw_key, raw in mapping.items():
            key = raw_key.strip().lower().replace("-", "_")
            if key not in hints:
                raise ConfigurationError(f"unknown config key {raw_key!r}")
            if raw is None:
                continue
            values[key] = _coerce(key, hints[key], raw)
        return cls(**values)

    def to_mapping(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "angles":
                out[f.name] = ",".join(repr(float(a)) for a in value)
            elif value is None:
                out[f.name] = "none"
            else:
                out[f.name] = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
        return out

    def expected_unlabeled(self) -> Optional[int]:
        if self.dataset != "synthetic":
            return None
        test_per_emitter = int(round(self.test_fraction * self.per_emitter))
        return self.num_emitters * (self.per_emitter - test_per_emitter) - self.initial_labeled

    def validate(self, require_seed: bool = False) -> None:
        """Raise ConfigurationError on hard violations; warn on soft ones."""
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_emitters < 2:
            problems.append(f"num_emitters must be >= 2, got {self.num_emitters}")
        for name in ("per_emitter", "batch_size", "queue_depth", "channel_taps"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("initial_labeled", "rounds", "budget", "pretrain_epochs", "train_epochs"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.initial_labeled == 0:
            problems.append("initial_labeled must be >= 1 so stage 2 has data in round 0")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.lr <= 0.0 or self.tau <= 0.0:
            problems.append(f"lr and tau must be > 0, got lr={self.lr}, tau={self.tau}")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.momentum <= 1.0:
            problems.append(f"alpha and momentum must lie in [0, 1], got alpha={self.alpha}, momentum={self.momentum}")
        if self.strategy == "bald" and self.mc_passes < 2:
            problems.append(f"BALD needs mc_passes >= 2, got {self.mc_passes}")
        if len(self.angles) != 2:
            problems.append(f"angles must hold exactly two rotation angles, got {len(self.angles)}")
        if require_seed and self.seed is None:
            problems.append("a seed is required to run an experiment")
        if problems:
            raise ConfigurationError("; ".join(problems))

        if self.initial_labeled < self.num_emitters:
            logger.warning(f"initial_labeled={self.initial_labeled} is below num_emitters={self.num_emitters}; "
                           f"some emitters start without labels")
        expected = self.expected_unlabeled()
        if expected is not None and self.budget * self.rounds > expected:
            logger.warning(f"budget x rounds = {self.budget * self.rounds} exceeds the {expected} unlabeled records; "
                           f"the run will stop early")


def _parse_angle(token: str) -> float:
    token = token.strip().lower().replace("π", "pi")
    if token.endswith("pi"):
        coefficient = token[:-2].rstrip("*")
        return (float(coefficient) if coefficient else 1.0) * math.pi
    return float(token)


def _coerce(key: str, hint: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return tuple(float(a) for a in raw) if key == "angles" else raw
    text = raw.strip()
    try:
        if key == "angles":
            return tuple(_parse_angle(t) for t in text.split(",") if t.strip())
        if hint is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if hint == Optional[int]:
            return None if text.lower() in ("", "none") else int(text)
        return hint(text)
    except ValueError as e:
        raise ConfigurationError(f"invalid value {raw!r} for config key {key!r}") from e


def load_config_file(path: str) -> Dict[str, Optional[str]]:
    """Flat KEY=value file; comments and quoting follow dotenv rules."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def build_config(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults, then the config file, then non-None overrides (CLI flags)."""
    config = ExperimentConfig()
    if config_path:
        config = ExperimentConfig.from_mapping(load_config_file(config_path), base=config)
    if overrides:
        config = ExperimentConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, base=config)
    return config


def write_config_snapshot(config: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in config.to_mapping().items():
            handle.write(f"{key}={value}\n")


# --- Reports ---

@dataclass
class RoundReport:
    """Metrics of one AL round; wall_time is excluded from equality."""

    round_index: int
    labeled_count: int
    test_accuracy: float
    per_class_accuracy: List[Optional[float]]
    selector: str
    wall_time: float = field(default=0.0, compare=False)

    def to_row(self) -> Tuple:
        per_class = ";".join("" if a is None else repr(float(a)) for a in self.per_class_accuracy)
        return (self.round_index, self.labeled_count, self.test_accuracy, per_class, self.selector, self.wall_time)

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "RoundReport":
        per_class = [None if v == "" else float(v) for v in row["per_class_accuracy"].split(";")] \
            if row["per_class_accuracy"] else []
        return cls(round_index=int(row["round"]), labeled_count=int(row["labeled_count"]),
                   test_accuracy=float(row["test_accuracy"]), per_class_accuracy=per_class,
                   selector=row["selector"], wall_time=float(row["wall_time"]))


@dataclass
class EvaluationResult:
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    confusion: np.ndarray


def evaluate(params: NetworkParams, records: Sequence[IQRecord], theta: float) -> EvaluationResult:
    """Accuracy, per-class accuracy (None for absent classes) and confusion matrix (true x predicted)."""
    if not records:
        raise ConfigurationError("cannot evaluate on an empty record list")
    m = params.architecture.num_emitters
    truth = np.array([r.emitter_truth for r in records])
    predicted = predict_proba(params, records, theta).argmax(axis=1)
    confusion = np.zeros((m, m), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / totals[c]) if totals[c] else None for c in range(m)]
    return EvaluationResult(accuracy=float(np.mean(truth == predicted)), per_class_accuracy=per_class,
                            confusion=confusion)


@dataclass
class ExperimentResult:
    reports: List[RoundReport]
    status: str
    run_dir: str
    params: Optional[NetworkParams] = None


# --- Pipeline ---

def build_pools(config: ExperimentConfig) -> DatasetPools:
    """Synthetic dataset or I/Q file split into labeled / unlabeled / test pools."""
    if config.dataset == "synthetic":
        if config.channel_taps == 1:
            channel = ChannelConfig(snr_db=config.snr_db)
        else:
            channel = ChannelConfig.multipath(config.channel_taps, config.snr_db, named_stream(config.seed, "channel"))
        pools, _ = generate_dataset(config.num_emitters, config.per_emitter, config.length, channel, config.seed,
                                    initial_labeled=config.initial_labeled, test_fraction=config.test_fraction)
    else:
        records = load_iq_file(config.dataset)
        if not records or any(r.emitter_truth is None for r in records):
            raise ConfigurationError(f"{config.dataset}: experiments need a nonempty file with ground-truth labels")
        bad = sorted({r.emitter_truth for r in records} - set(range(config.num_emitters)))
        if bad:
            raise ConfigurationError(f"{config.dataset}: labels {bad} out of range 0..{config.num_emitters - 1}")
        pools = split_pools(records, config.initial_labeled, config.test_fraction, named_stream(config.seed, "split"))
    if not pools.test:
        raise ConfigurationError("test pool is empty; increase test_fraction or the dataset size")
    return pools


def _audit_test_isolation(pools: DatasetPools, test_ids: set, round_index: int) -> None:
    leaked = sorted(test_ids & {r.record_id for r in pools.labeled + pools.unlabeled})
    if leaked:
        raise SelectionError(f"round {round_index}: test records {leaked} entered the training pools")


def _pretrain(config: ExperimentConfig, params: NetworkParams, pools: DatasetPools, queue: KeyQueue,
              run_dir: str, tag: str) -> NetworkParams:
    pool = pools.unlabeled
    if not pool or config.pretrain_epochs == 0:
        logger.info("Skipping stage 1: no unlabeled records or zero epochs")
        return params
    logger.info(f"Stage 1: contrastive pretraining on {len(pool)} unlabeled records for {config.pretrain_epochs} epochs")
    params, history = pretrain_stage1(params, pool, config.pretrain_epochs, min(config.batch_size, len(pool)),
                                      queue, config.tau, config.momentum, config.lr,
                                      named_stream(config.seed, "pretrain", tag), config.angles)
    write_history_csv(history, os.path.join(run_dir, f"pretrain_{tag}_history.csv"))
    save_checkpoint(params, os.path.join(run_dir, f"pretrain_{tag}.ckpt"), config.seed, "pretrain")
    if history:
        logger.info(f"Stage 1 done: L_CL {history[0].l_cl:.4f} -> {history[-1].l_cl:.4f}")
    return params


def select_candidates(config: ExperimentConfig, params: NetworkParams, pools: DatasetPools,
                      round_index: int) -> CandidateScores:
    theta = config.angles[0]
    if config.strategy == "bald":
        scores = bald_scores(params, pools.unlabeled, config.mc_passes,
                             named_stream(config.seed, "mc_dropout", round_index), theta)
        return select_bald(scores, config.budget)
    if config.strategy == "kcenter":
        return select_kcenter(params, pools.unlabeled, pools.labeled, config.budget, theta)
    draw_seed = int(named_stream(config.seed, "random_select", round_index).integers(2 ** 31))
    return select_random(len(pools.unlabeled), config.budget, draw_seed)


def default_run_dir(config: ExperimentConfig) -> str:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    name = f"{config.mode}-{config.strategy}-alpha{config.alpha:g}-seed{config.seed}-{stamp}"
    return os.path.join(os.getenv("SEI_RUNS_DIR", "runs"), name)


def run_experiment(config: ExperimentConfig, run_dir: Optional[str] = None) -> ExperimentResult:
    """
    Run the full pipeline for one configuration and seed.

    Returns:
        ExperimentResult with one RoundReport per completed round and a
        status of "completed" or "pool_exhausted".
    """
    config.validate(require_seed=True)
    run_dir = run_dir or default_run_dir(config)
    os.makedirs(run_dir, exist_ok=True)
    write_config_snapshot(config, os.path.join(run_dir, CONFIG_SNAPSHOT))
    log_handler = attach_run_log(run_dir)
    try:
        return _run_rounds(config, run_dir)
    finally:
        logging.getLogger().removeHandler(log_handler)
        log_handler.close()


def _run_rounds(config: ExperimentConfig, run_dir: str) -> ExperimentResult:
    logger.info(f"Run {os.path.basename(run_dir)}: mode={config.mode} strategy={config.strategy} "
                f"alpha={config.alpha} seed={config.seed}")
    pools = build_pools(config)
    test_ids = {r.record_id for r in pools.test}
    length = pools.test[0].length
    classifier_input = "encoder" if config.mode == "baseline" else "projection"
    params = init_network(Architecture(num_emitters=config.num_emitters, length=length,
                                       classifier_input=classifier_input),
                          named_stream(config.seed, "init"))
    queue = KeyQueue(config.queue_depth)
    if config.pretrain:
        params = _pretrain(config, params, pools, queue, run_dir, "initial")
    base_params = params.copy()

    reports: List[RoundReport] = []
    selection_rows: List[Tuple] = []
    status = "completed"
    for round_index in range(config.rounds + 1):
        started = time.perf_counter()
        _audit_test_isolation(pools, test_ids, round_index)
        if round_index > 0 and config.cold_start:
            params = base_params.copy()
        if round_index > 0 and config.pretrain and config.repretrain_each_round:
            params = _pretrain(config, params, pools, queue, run_dir, f"round{round_index:03d}")

        params, history = train_stage2(
            params, pools.labeled, config.train_epochs, LossWeights(config.alpha, config.tau),
            config.batch_size, queue, config.momentum, config.lr,
            named_stream(config.seed, "train", round_index), config.angles, config.include_contrastive)
        write_history_csv(history, os.path.join(run_dir, f"round_{round_index:03d}_history.csv"))
        save_checkpoint(params, os.path.join(run_dir, f"round_{round_index:03d}.ckpt"), config.seed, "train")
        evaluation = evaluate(params, pools.test, config.angles[0])
        report = RoundReport(round_index=round_index, labeled_count=len(pools.labeled),
                             test_accuracy=evaluation.accuracy, per_class_accuracy=evaluation.per_class_accuracy,
                             selector="initial" if round_index == 0 else config.strategy)
        logger.info(f"Round {round_index}: {report.labeled_count} labeled, test accuracy {report.test_accuracy:.4f}")

        if round_index < config.rounds:
            if len(pools.unlabeled) < config.budget:
                status = "pool_exhausted"
                logger.warning(f"Stopping after round {round_index}: {len(pools.unlabeled)} unlabeled records left, "
                               f"budget is {config.budget}")
            else:
                candidates = select_candidates(config, params, pools, round_index)
                rows = candidates.to_rows(round_index)
                write_selection_csv(rows, os.path.join(run_dir, f"selection_round_{round_index:03d}.csv"))
                selection_rows.extend(rows)
                pools = reveal_label(pools, candidates.indices)

        report.wall_time = time.perf_counter() - started
        reports.append(report)
        write_csv(os.path.join(run_dir, f"round_{round_index:03d}.csv"), ROUND_HEADER, [report.to_row()])
        if status != "completed":
            break

    write_csv(os.path.join(run_dir, ROUNDS_FILE), ROUND_HEADER, [r.to_row() for r in reports])
    write_selection_csv(selection_rows, os.path.join(run_dir, "selections.csv"))
    with open(os.path.join(run_dir, SUMMARY_FILE), "w", encoding="utf-8") as handle:
        json.dump({"status": status, "completed_rounds": len(reports), "planned_rounds": config.rounds + 1,
                   "final_accuracy": reports[-1].test_accuracy}, handle, indent=2)
    return ExperimentResult(reports=reports, status=status, run_dir=run_dir, params=params)


def baseline_config(config: ExperimentConfig) -> ExperimentConfig:
    """Plain supervised CNN: no pretraining, CE only, random selection."""
    return replace(config, mode="baseline", strategy="random", alpha=0.0, pretrain=False,
                   include_contrastive=False, repretrain_each_round=False)


def run_baseline_cnn(config: ExperimentConfig, run_dir: Optional[str] = None) -> ExperimentResult:
    return run_experiment(baseline_config(config), run_dir)


def _run_worker(mapping: Dict[str, str], run_dir: str) -> Tuple[List[RoundReport], str]:
    setup_logging()
    result = run_experiment(ExperimentConfig.from_mapping(mapping), run_dir)
    return result.reports, result.status


async def run_concurrently(jobs: Sequence[Tuple[ExperimentConfig, str]],
                           max_workers: Optional[int] = None) -> List[Tuple[List[RoundReport], str]]:
    """Run independent experiments in separate processes, one run directory each."""
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        tasks = [loop.run_in_executor(pool, _run_worker, config.to_mapping(), run_dir) for config, run_dir in jobs]
        return await asyncio.gather(*tasks)


# --- Aggregation ---

class CurveKey(NamedTuple):
    mode: str
    strategy: str
    alpha: float

    @property
    def label(self) -> str:
        return f"{self.mode}/{self.strategy}/alpha={self.alpha:g}"


@dataclass
class CurvePoint:
    round_index: int
    labeled_count: int
    mean_accuracy: float
    std_accuracy: float
    runs: int


@dataclass
class ReportSummary:
    curves: Dict[CurveKey, List[CurvePoint]]
    alpha_sweep: Dict[Tuple[str, float], float]
    run_dirs: List[str]
    curves_path: str
    alpha_sweep_path: Optional[str] = None


def _find_run_dirs(path: str) -> List[str]:
    if os.path.isfile(os.path.join(path, CONFIG_SNAPSHOT)):
        return [path]
    if not os.path.isdir(path):
        raise ReportError("not a directory", [path])
    found = sorted(os.path.join(path, d) for d in os.listdir(path)
                   if os.path.isfile(os.path.join(path, d, CONFIG_SNAPSHOT)))
    if not found:
        raise ReportError(f"no run directories under {path}", [CONFIG_SNAPSHOT])
    return found


def load_run(run_dir: str) -> Tuple[ExperimentConfig, List[RoundReport]]:
    """Read a finished run directory; missing files raise ReportError listing every gap."""
    config = ExperimentConfig.from_mapping(load_config_file(os.path.join(run_dir, CONFIG_SNAPSHOT)))
    summary_path = os.path.join(run_dir, SUMMARY_FILE)
    if not os.path.isfile(summary_path):
        raise ReportError(f"run directory {run_dir} is incomplete", [SUMMARY_FILE])
    with open(summary_path, encoding="utf-8") as handle:
        completed = int(json.load(handle)["completed_rounds"])
    names = [f"round_{r:03d}.csv" for r in range(completed)]
    missing = [n for n in names if not os.path.isfile(os.path.join(run_dir, n))]
    if missing:
        raise ReportError(f"run directory {run_dir} is missing round files", missing)
    reports = [RoundReport.from_row(read_csv(os.path.join(run_dir, n))[0]) for n in names]
    return config, reports


def report(path: str) -> ReportSummary:
    """
    Aggregate one run directory or a directory of runs into plot-ready CSVs.

    Writes curves.csv (mean/std accuracy per round for every
    (mode, strategy, alpha) curve) and, when several alphas are present,
    alpha_sweep.csv with the mean final-round accuracy per alpha.
    """
    run_dirs = _find_run_dirs(path)
    runs = [load_run(d) for d in run_dirs]
    grouped: Dict[CurveKey, Dict[int, List[RoundReport]]] = {}
    finals: Dict[Tuple[str, float], List[float]] = {}
    for config, reports in runs:
        key = CurveKey(config.mode, config.strategy, config.alpha)
        for r in reports:
            grouped.setdefault(key, {}).setdefault(r.round_index, []).append(r)
        finals.setdefault((config.mode, config.alpha), []).append(reports[-1].test_accuracy)

    curves: Dict[CurveKey, List[CurvePoint]] = {}
    rows = []
    for key in sorted(grouped):
        points = []
        for round_index in sorted(grouped[key]):
            members = grouped[key][round_index]
            accuracies = np.array([m.test_accuracy for m in members])
            point = CurvePoint(round_index, members[0].labeled_count, float(accuracies.mean()),
                               float(accuracies.std()), len(members))
            points.append(point)
            rows.append((key.label, key.mode, key.strategy, key.alpha, point.round_index, point.labeled_count,
                         point.mean_accuracy, point.std_accuracy, point.runs))
        curves[key] = points

    out_dir = path
    curves_path = os.path.join(out_dir, CURVES_FILE)
    write_csv(curves_path, ("curve", "mode", "strategy", "alpha", "round", "labeled_count",
                            "mean_accuracy", "std_accuracy", "runs"), rows)

    alpha_sweep = {key: float(np.mean(values)) for key, values in sorted(finals.items())}
    sweep_path = None
    if len({alpha for _, alpha in alpha_sweep}) > 1:
        sweep_path = os.path.join(out_dir, ALPHA_SWEEP_FILE)
        write_csv(sweep_path, ("mode", "alpha", "mean_final_accuracy", "runs"),
                  [(mode, alpha, acc, len(finals[(mode, alpha)])) for (mode, alpha), acc in alpha_sweep.items()])
    return ReportSummary(curves=curves, alpha_sweep=alpha_sweep, run_dirs=run_dirs,
                         curves_path=curves_path, alpha_sweep_path=sweep_path)
