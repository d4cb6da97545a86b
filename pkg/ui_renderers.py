#!/usr/bin/env python3
"""
UI rendering functions for the active-learning emitter identifier.
Contains all terminal output formatting and display functions.
"""

import math
from typing import Dict, List, Optional, Sequence

from colorama import Fore, Style


def _accuracy_color(accuracy: float, chance: float) -> str:
    if accuracy >= 0.9:
        return Fore.GREEN
    if accuracy > chance:
        return Fore.YELLOW
    return Fore.RED


def _fmt(value: Optional[float], width: int, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return f"{'-':>{width}}"
    return f"{value:>{width}.{digits}f}"


def render_dataset_summary(pools, path: Optional[str] = None, indent=""):
    """Pool sizes and per-emitter counts of a simulated or loaded dataset.

    Args:
        pools: DatasetPools to describe
        path: File the pools were written to, if any
        indent: String to prepend to each line for indentation
    """
    print(Fore.GREEN + f"{indent}--- Dataset ---" + Style.RESET_ALL)
    if path:
        print(f"{indent}File:      {path}")
    print(f"{indent}Labeled:   {len(pools.labeled):>6}")
    print(f"{indent}Unlabeled: {len(pools.unlabeled):>6}")
    print(f"{indent}Test:      {len(pools.test):>6}")

    counts: Dict[int, int] = {}
    for record in pools.labeled + pools.unlabeled + pools.test:
        if record.emitter_truth is not None:
            counts[record.emitter_truth] = counts.get(record.emitter_truth, 0) + 1
    if counts:
        print(f"{indent}Records per emitter: " + ", ".join(f"{e}:{n}" for e, n in sorted(counts.items())))


def render_epoch_history(history, title="Training History", max_rows=10, indent=""):
    """Per-epoch losses; long histories show the first and last epochs only."""
    if not history:
        print(Fore.YELLOW + f"{indent}No epochs were run." + Style.RESET_ALL)
        return

    print(Fore.GREEN + f"{indent}{title}:" + Style.RESET_ALL)
    header = f"{'Epoch':>6} {'L_CL':>10} {'L_CE':>10} {'L':>10} {'Train Acc':>10}"
    print(f"{indent}{header}")
    print(f"{indent}" + "-" * len(header))

    shown = list(history)
    if len(shown) > max_rows:
        half = max_rows // 2
        shown = shown[:half] + [None] + shown[-half:]
    for stats in shown:
        if stats is None:
            print(f"{indent}{'...':>6}")
            continue
        print(f"{indent}{stats.epoch:>6} {_fmt(stats.l_cl, 10)} {_fmt(stats.l_ce, 10)} "
              f"{_fmt(stats.l_total, 10)} {_fmt(stats.train_acc, 10, 3)}")


def render_round_reports(reports, num_emitters: int, title="ACTIVE LEARNING ROUNDS", indent=""):
    """Render one row per round with test accuracy colored against chance level.

    Args:
        reports: List of RoundReport
        num_emitters: Number of classes; chance accuracy is 1 / num_emitters
        title: Title to display above the table
        indent: String to prepend to each line for indentation
    """
    if not reports:
        print(Fore.YELLOW + f"{indent}No rounds completed." + Style.RESET_ALL)
        return

    print(Fore.GREEN + f"\n{indent}{'=' * 78}")
    print(f"{indent}{title}")
    print(f"{indent}{'=' * 78}" + Style.RESET_ALL)
    header = f"{'Round':>5} {'Labeled':>8} {'Selector':<10} {'Test Acc':>9} {'Wall (s)':>9}  Per-class accuracy"
    print(f"{indent}{header}")
    print(f"{indent}" + "-" * len(header))

    chance = 1.0 / num_emitters
    for report in reports:
        color = _accuracy_color(report.test_accuracy, chance)
        per_class = " ".join("  - " if a is None else f"{a:.2f}" for a in report.per_class_accuracy)
        print(f"{indent}{report.round_index:>5} {report.labeled_count:>8} {report.selector:<10} "
              f"{color}{report.test_accuracy:>9.4f}{Style.RESET_ALL} {report.wall_time:>9.1f}  {per_class}")

    best = max(reports, key=lambda r: r.test_accuracy)
    print(f"\n{indent}{Fore.CYAN}Summary:")
    print(f"{indent}  Rounds completed: {len(reports)}")
    print(f"{indent}  Final accuracy:   {reports[-1].test_accuracy:.4f} with {reports[-1].labeled_count} labels")
    print(f"{indent}  Best accuracy:    {best.test_accuracy:.4f} (round {best.round_index}){Style.RESET_ALL}")


def render_selection(candidates, title="Selected Records", indent=""):
    if not candidates.indices:
        print(Fore.YELLOW + f"{indent}Nothing selected." + Style.RESET_ALL)
        return

    print(Fore.GREEN + f"{indent}{title} ({candidates.strategy}, {len(candidates.indices)} picks):" + Style.RESET_ALL)
    score_name = "BALD" if candidates.strategy == "bald" else "Order"
    header = f"{'Pick':>5} {'Index':>7} {score_name:>10}"
    if candidates.min_distances is not None:
        header += f" {'Min dist':>10}"
    print(f"{indent}{header}")
    print(f"{indent}" + "-" * len(header))
    for pick, (index, score) in enumerate(zip(candidates.indices, candidates.scores)):
        line = f"{indent}{pick:>5} {index:>7} {score:>10.4f}"
        if candidates.min_distances is not None:
            line += f" {candidates.min_distances[pick]:>10.4f}"
        print(line)


def render_curves(summary, indent=""):
    """Aggregated accuracy curves from report(); one block per curve."""
    if not summary.curves:
        print(Fore.YELLOW + f"{indent}No curves to show." + Style.RESET_ALL)
        return

    print(Fore.GREEN + f"{indent}Accuracy curves from {len(summary.run_dirs)} run(s):" + Style.RESET_ALL)
    for key, points in summary.curves.items():
        print(f"\n{indent}{Fore.CYAN}{key.label}{Style.RESET_ALL}")
        header = f"{'Round':>5} {'Labeled':>8} {'Mean Acc':>9} {'Std':>8} {'Runs':>5}"
        print(f"{indent}{header}")
        print(f"{indent}" + "-" * len(header))
        for p in points:
            print(f"{indent}{p.round_index:>5} {p.labeled_count:>8} {p.mean_accuracy:>9.4f} "
                  f"{p.std_accuracy:>8.4f} {p.runs:>5}")

    if summary.alpha_sweep_path:
        print(f"\n{indent}{Fore.CYAN}Final accuracy by alpha:{Style.RESET_ALL}")
        for (mode, alpha), accuracy in summary.alpha_sweep.items():
            print(f"{indent}  {mode:<9} alpha={alpha:<6g} {accuracy:.4f}")
    print(f"\n{indent}Wrote {summary.curves_path}")
    if summary.alpha_sweep_path:
        print(f"{indent}Wrote {summary.alpha_sweep_path}")


def render_comparison(results: Dict[str, Sequence], title="STRATEGY COMPARISON", indent=""):
    """Side-by-side test accuracy per round for several runs sharing a seed.

    Args:
        results: Mapping of run label to its list of RoundReport
        title: Title to display above the table
        indent: String to prepend to each line for indentation
    """
    if not results:
        print(Fore.YELLOW + f"{indent}No runs to compare." + Style.RESET_ALL)
        return

    labels = list(results)
    print(Fore.GREEN + f"\n{indent}{title}" + Style.RESET_ALL)
    header = f"{'Round':>5} {'Labeled':>8} " + " ".join(f"{label:>14}" for label in labels)
    print(f"{indent}{header}")
    print(f"{indent}" + "-" * len(header))

    rounds = max(len(r) for r in results.values())
    for i in range(rounds):
        row_reports: List = [results[label][i] if i < len(results[label]) else None for label in labels]
        labeled = next(r.labeled_count for r in row_reports if r is not None)
        accuracies = [r.test_accuracy for r in row_reports if r is not None]
        top = max(accuracies)
        cells = []
        for report in row_reports:
            if report is None:
                cells.append(f"{'-':>14}")
            elif report.test_accuracy == top and len(accuracies) > 1:
                cells.append(f"{Fore.GREEN}{report.test_accuracy:>14.4f}{Style.RESET_ALL}")
            else:
                cells.append(f"{report.test_accuracy:>14.4f}")
        print(f"{indent}{i:>5} {labeled:>8} " + " ".join(cells))


def render_checkpoint_summary(header: dict, path: str, indent=""):
    print(Fore.GREEN + f"{indent}--- Checkpoint ---" + Style.RESET_ALL)
    arch = header.get("architecture", {})
    print(f"{indent}File:     {path}")
    print(f"{indent}Stage:    {header.get('stage', '?')}")
    print(f"{indent}Seed:     {header.get('seed', '?')}")
    print(f"{indent}Emitters: {arch.get('num_emitters', '?')}  Length: {arch.get('length', '?')}")
