#!/usr/bin/env python3
"""
CLI command functions for the active-learning emitter identifier.
Each function drives one subcommand and returns the process exit status.
"""

import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from colorama import Fore, Style

from contrastive_training import KeyQueue, LossWeights, pretrain_stage1, train_stage2, write_history_csv
from emitter_signals import save_iq_file
from experiment_harness import (ExperimentConfig, baseline_config, build_pools, evaluate, report, run_concurrently,
                                run_experiment, select_candidates)
from query_selectors import write_selection_csv
from sei_network import Architecture, init_network, load_checkpoint, save_checkpoint
from ui_renderers import (render_checkpoint_summary, render_comparison, render_curves, render_dataset_summary,
                          render_epoch_history, render_round_reports, render_selection)
from utils import SEIError, named_stream


def _error(message) -> int:
    print(Fore.RED + f"ERROR: {message}" + Style.RESET_ALL)
    return 1


def _seed(config: ExperimentConfig) -> int:
    return config.seed if config.seed is not None else 0


def _history_path(checkpoint_path: str) -> str:
    return os.path.splitext(checkpoint_path)[0] + "_history.csv"


def simulate_cli(config: ExperimentConfig, output: str, sample_rate: float = 1.0) -> int:
    """Simulate the configured emitters and write every record, with truth labels, to an I/Q file."""
    print(Fore.CYAN + f"Simulating {config.num_emitters} emitters x {config.per_emitter} records..." + Style.RESET_ALL)
    try:
        config = replace(config, dataset="synthetic", seed=_seed(config))
        config.validate()
        pools = build_pools(config)
        records = sorted(pools.labeled + pools.unlabeled + pools.test, key=lambda r: r.record_id)
        save_iq_file([r.revealed() for r in records], output, sample_rate)
        render_dataset_summary(pools, path=output)
    except SEIError as e:
        return _error(f"Failed to simulate dataset: {e}")
    print(Fore.GREEN + f"Wrote {len(records)} records to {output}" + Style.RESET_ALL)
    return 0


def pretrain_cli(config: ExperimentConfig, output: str) -> int:
    """Stage 1 only: contrastive pretraining on the unlabeled pool, saved as a checkpoint."""
    print(Fore.CYAN + "Running contrastive pretraining..." + Style.RESET_ALL)
    try:
        config = replace(config, seed=_seed(config))
        config.validate()
        pools = build_pools(config)
        params = init_network(Architecture(config.num_emitters, pools.test[0].length),
                              named_stream(config.seed, "init"))
        params, history = pretrain_stage1(params, pools.unlabeled, config.pretrain_epochs,
                                          min(config.batch_size, len(pools.unlabeled)),
                                          KeyQueue(config.queue_depth), config.tau, config.momentum, config.lr,
                                          named_stream(config.seed, "pretrain", "initial"), config.angles)
        save_checkpoint(params, output, config.seed, "pretrain")
        write_history_csv(history, _history_path(output))
    except SEIError as e:
        return _error(f"Pretraining failed: {e}")
    render_epoch_history(history, title="Stage 1 (contrastive)")
    print(Fore.GREEN + f"Saved checkpoint to {output}" + Style.RESET_ALL)
    return 0


def train_cli(config: ExperimentConfig, checkpoint: Optional[str], output: str) -> int:
    """Stage 2 on the labeled pool, from a checkpoint or fresh weights; reports test accuracy."""
    print(Fore.CYAN + "Running supervised fine-tuning..." + Style.RESET_ALL)
    try:
        config = replace(config, seed=_seed(config))
        config.validate()
        pools = build_pools(config)
        arch = Architecture(config.num_emitters, pools.test[0].length)
        if checkpoint:
            params, header = load_checkpoint(checkpoint, expected=arch)
            render_checkpoint_summary(header, checkpoint)
        else:
            params = init_network(arch, named_stream(config.seed, "init"))
        params, history = train_stage2(params, pools.labeled, config.train_epochs,
                                       LossWeights(config.alpha, config.tau), config.batch_size,
                                       KeyQueue(config.queue_depth), config.momentum, config.lr,
                                       named_stream(config.seed, "train", 0), config.angles,
                                       config.include_contrastive)
        save_checkpoint(params, output, config.seed, "train")
        write_history_csv(history, _history_path(output))
        result = evaluate(params, pools.test, config.angles[0])
    except SEIError as e:
        return _error(f"Training failed: {e}")
    render_epoch_history(history, title="Stage 2 (joint loss)")
    print(f"\nTest accuracy: {Fore.GREEN}{result.accuracy:.4f}{Style.RESET_ALL} on {len(pools.test)} records")
    print(Fore.GREEN + f"Saved checkpoint to {output}" + Style.RESET_ALL)
    return 0


def select_cli(config: ExperimentConfig, checkpoint: str, output: str) -> int:
    """Score the unlabeled pool with a trained checkpoint and write the selected indices."""
    print(Fore.CYAN + f"Selecting {config.budget} records with {config.strategy}..." + Style.RESET_ALL)
    try:
        config = replace(config, seed=_seed(config))
        config.validate()
        pools = build_pools(config)
        params, _ = load_checkpoint(checkpoint, expected=Architecture(config.num_emitters, pools.test[0].length))
        candidates = select_candidates(config, params, pools, 0)
        write_selection_csv(candidates.to_rows(0), output)
    except SEIError as e:
        return _error(f"Selection failed: {e}")
    render_selection(candidates)
    print(Fore.GREEN + f"Wrote selection to {output}" + Style.RESET_ALL)
    return 0


def run_cli(config: ExperimentConfig, run_dir: Optional[str] = None, baseline: bool = False) -> int:
    """Full experiment (or the plain CNN baseline) into one run directory."""
    if config.seed is None:
        return _error("--seed is required for run")
    label = "baseline CNN" if baseline else f"{config.strategy} active learning"
    print(Fore.CYAN + f"Running {label} experiment (seed {config.seed})..." + Style.RESET_ALL)
    try:
        result = run_experiment(baseline_config(config) if baseline else config, run_dir)
    except SEIError as e:
        return _error(f"Experiment failed: {e}")
    render_round_reports(result.reports, config.num_emitters)
    status_color = Fore.GREEN if result.status == "completed" else Fore.YELLOW
    print(f"\nStatus: {status_color}{result.status}{Style.RESET_ALL}")
    print(f"Run directory: {result.run_dir}")
    return 0


def report_cli(path: str) -> int:
    try:
        summary = report(path)
    except SEIError as e:
        return _error(f"Report failed: {e}")
    render_curves(summary)
    return 0


def _runs_root(runs_dir: Optional[str], name: str) -> str:
    root = os.path.join(runs_dir or os.getenv("SEI_RUNS_DIR", "runs"), name)
    os.makedirs(root, exist_ok=True)
    return root


async def compare_cli(config: ExperimentConfig, strategies: Sequence[str], seeds: Sequence[int],
                      include_baseline: bool = True, runs_dir: Optional[str] = None,
                      workers: Optional[int] = None) -> int:
    """Paired strategy comparison: every strategy (and the baseline) on every seed, run concurrently."""
    root = _runs_root(runs_dir, "compare")
    jobs = []
    labels: List[str] = []
    try:
        for seed in seeds:
            for strategy in strategies:
                job = replace(config, strategy=strategy, seed=seed)
                job.validate(require_seed=True)
                jobs.append((job, os.path.join(root, f"{strategy}-seed{seed}")))
                labels.append(strategy)
            if include_baseline:
                job = baseline_config(replace(config, seed=seed))
                job.validate(require_seed=True)
                jobs.append((job, os.path.join(root, f"baseline-seed{seed}")))
                labels.append("baseline")
        print(Fore.CYAN + f"Running {len(jobs)} experiments into {root}..." + Style.RESET_ALL)
        outcomes = await run_concurrently(jobs, workers)
        summary = report(root)
    except SEIError as e:
        return _error(f"Comparison failed: {e}")

    first_seed: Dict[str, list] = {}
    for label, (reports, status) in zip(labels, outcomes):
        first_seed.setdefault(label, reports)
        if status != "completed":
            print(Fore.YELLOW + f"{label}: stopped early ({status})" + Style.RESET_ALL)
    render_comparison(first_seed, title=f"STRATEGY COMPARISON (seed {seeds[0]})")
    print()
    render_curves(summary)
    return 0


async def sweep_alpha_cli(config: ExperimentConfig, alphas: Sequence[float], seeds: Sequence[int],
                          runs_dir: Optional[str] = None, workers: Optional[int] = None) -> int:
    """Joint-loss weight sweep; the aggregated report includes alpha_sweep.csv."""
    root = _runs_root(runs_dir, "alpha_sweep")
    jobs = []
    try:
        for seed in seeds:
            for alpha in alphas:
                job = replace(config, alpha=float(alpha), seed=seed)
                job.validate(require_seed=True)
                jobs.append((job, os.path.join(root, f"alpha{alpha:g}-seed{seed}")))
        print(Fore.CYAN + f"Running {len(jobs)} experiments into {root}..." + Style.RESET_ALL)
        outcomes = await run_concurrently(jobs, workers)
        summary = report(root)
    except SEIError as e:
        return _error(f"Alpha sweep failed: {e}")

    render_comparison({f"alpha={job.alpha:g}": reports
                       for (job, _), (reports, _) in zip(jobs, outcomes) if job.seed == seeds[0]},
                      title=f"ALPHA SWEEP (seed {seeds[0]})")
    print()
    render_curves(summary)
    return 0
