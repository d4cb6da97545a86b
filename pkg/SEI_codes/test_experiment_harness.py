#!/usr/bin/env python3
"""
Test suite for experiment_harness.py: configuration layering, the round
loop, run-directory artifacts and report aggregation.
"""

import json
import math
import os
import sys
import tempfile
import unittest
from dataclasses import replace

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from emitter_signals import DatasetPools, IQRecord, save_iq_file
from experiment_harness import (ExperimentConfig, RoundReport, _audit_test_isolation, baseline_config, build_config,
                                build_pools, evaluate, load_run, report, run_baseline_cnn, run_experiment)
from sei_network import Architecture, init_network
from utils import ConfigurationError, ReportError, SelectionError, named_stream, read_csv


def tiny_config(**overrides):
    values = dict(num_emitters=2, length=64, per_emitter=6, test_fraction=0.34, snr_db=20.0, initial_labeled=2,
                  rounds=2, budget=2, strategy="kcenter", pretrain_epochs=1, train_epochs=2, batch_size=4,
                  queue_depth=16, seed=3)
    values.update(overrides)
    return ExperimentConfig(**values)


class TestConfiguration(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_mapping_coerces_strings(self):
        config = ExperimentConfig.from_mapping({
            "NUM_EMITTERS": "5", "alpha": "0.5", "pretrain": "false", "seed": "11",
            "angles": "0.5pi, pi", "strategy": "bald"})
        self.assertEqual(config.num_emitters, 5)
        self.assertEqual(config.alpha, 0.5)
        self.assertFalse(config.pretrain)
        self.assertEqual(config.seed, 11)
        self.assertEqual(config.angles, (0.5 * math.pi, math.pi))

    def test_unknown_key_and_bad_value(self):
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"learning_rate": "0.1"})
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"rounds": "many"})
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"pretrain": "maybe"})

    def test_file_then_flags_precedence(self):
        path = os.path.join(self.tmp.name, "exp.env")
        with open(path, "w") as handle:
            handle.write("# desk-scale run\nrounds=7\nbudget=5\nalpha=0.3\n")
        config = build_config(path, {"budget": "9", "rounds": None})
        self.assertEqual(config.rounds, 7)
        self.assertEqual(config.budget, 9)
        self.assertEqual(config.alpha, 0.3)
        self.assertEqual(config.tau, ExperimentConfig().tau)

    def test_missing_config_file(self):
        with self.assertRaises(ConfigurationError):
            build_config(os.path.join(self.tmp.name, "absent.env"))

    def test_snapshot_round_trips(self):
        config = tiny_config(alpha=0.25, cold_start=True)
        self.assertEqual(ExperimentConfig.from_mapping(config.to_mapping()), config)

    def test_validation_errors(self):
        for bad in (dict(strategy="entropy"), dict(num_emitters=1), dict(alpha=1.5), dict(test_fraction=0.0),
                    dict(initial_labeled=0), dict(strategy="bald", mc_passes=1), dict(angles=(1.0,))):
            with self.assertRaises(ConfigurationError, msg=str(bad)):
                tiny_config(**bad).validate()
        with self.assertRaises(ConfigurationError):
            tiny_config(seed=None).validate(require_seed=True)

    def test_soft_warnings(self):
        with self.assertLogs("experiment_harness", level="WARNING") as logs:
            tiny_config(initial_labeled=1, rounds=10).validate()
        output = "\n".join(logs.output)
        self.assertIn("below num_emitters", output)
        self.assertIn("stop early", output)

    def test_baseline_settings(self):
        config = baseline_config(tiny_config(strategy="bald", alpha=0.1))
        self.assertEqual((config.mode, config.strategy, config.alpha), ("baseline", "random", 0.0))
        self.assertFalse(config.pretrain)
        self.assertFalse(config.include_contrastive)


class TestRunExperiment(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _dir(self, name):
        return os.path.join(self.tmp.name, name)

    def test_labeled_count_grows_by_budget(self):
        result = run_experiment(tiny_config(), self._dir("run"))
        self.assertEqual(result.status, "completed")
        self.assertEqual([r.labeled_count for r in result.reports], [2, 4, 6])
        self.assertEqual([r.selector for r in result.reports], ["initial", "kcenter", "kcenter"])
        for r in result.reports:
            self.assertTrue(0.0 <= r.test_accuracy <= 1.0)
            self.assertEqual(len(r.per_class_accuracy), 2)

    def test_zero_rounds_is_initial_evaluation_only(self):
        result = run_experiment(tiny_config(rounds=0), self._dir("run"))
        self.assertEqual(len(result.reports), 1)
        self.assertEqual(result.reports[0].labeled_count, 2)
        self.assertFalse(os.path.exists(os.path.join(result.run_dir, "selection_round_000.csv")))

    def test_same_seed_gives_identical_reports(self):
        config = tiny_config(strategy="bald", mc_passes=4)
        first = run_experiment(config, self._dir("a")).reports
        second = run_experiment(config, self._dir("b")).reports
        self.assertEqual(first, second)

    def test_run_directory_artifacts(self):
        result = run_experiment(tiny_config(), self._dir("run"))
        for name in ("config.env", "run.log", "summary.json", "rounds.csv", "selections.csv", "round_000.csv",
                     "round_000.ckpt", "round_002_history.csv", "pretrain_initial.ckpt",
                     "pretrain_initial_history.csv", "selection_round_001.csv"):
            self.assertTrue(os.path.isfile(os.path.join(result.run_dir, name)), name)
        with open(os.path.join(result.run_dir, "summary.json")) as handle:
            summary = json.load(handle)
        self.assertEqual(summary["status"], "completed")
        self.assertEqual(summary["completed_rounds"], 3)
        rows = read_csv(os.path.join(result.run_dir, "round_001.csv"))
        self.assertEqual(RoundReport.from_row(rows[0]), result.reports[1])
        selections = read_csv(os.path.join(result.run_dir, "selections.csv"))
        self.assertEqual(len(selections), 4)

    def test_pool_exhaustion_stops_early(self):
        with self.assertLogs("experiment_harness", level="WARNING") as logs:
            result = run_experiment(tiny_config(rounds=5, strategy="random"), self._dir("run"))
        self.assertEqual(result.status, "pool_exhausted")
        self.assertEqual([r.labeled_count for r in result.reports], [2, 4, 6, 8])
        self.assertTrue(any("Stopping after round 3" in line for line in logs.output))

    def test_seed_is_mandatory(self):
        with self.assertRaises(ConfigurationError):
            run_experiment(tiny_config(seed=None), self._dir("run"))

    def test_baseline_run(self):
        result = run_baseline_cnn(tiny_config(rounds=1), self._dir("baseline"))
        self.assertEqual(len(result.reports), 2)
        self.assertFalse(os.path.exists(os.path.join(result.run_dir, "pretrain_initial.ckpt")))
        loaded, _ = load_run(result.run_dir)
        self.assertEqual(loaded.mode, "baseline")

    def test_baseline_classifier_reads_encoder(self):
        config = tiny_config(rounds=1)
        result = run_baseline_cnn(config, self._dir("baseline"))
        arch = result.params.architecture
        self.assertEqual(arch.classifier_input, "encoder")
        self.assertEqual(result.params.classifier["fc1.weight"].shape[0], arch.channels[-1])
        # CE-only steps never touch the projection head
        initial = init_network(arch, named_stream(config.seed, "init"))
        self.assertEqual(result.params.checksum(["query_projection"]), initial.checksum(["query_projection"]))
        self.assertNotEqual(result.params.checksum(["query_encoder"]), initial.checksum(["query_encoder"]))
        pipeline = run_experiment(tiny_config(rounds=0), self._dir("pipeline"))
        self.assertEqual(pipeline.params.architecture.classifier_input, "projection")

    def test_repretrain_and_cold_start(self):
        result = run_experiment(tiny_config(rounds=1, repretrain_each_round=True, cold_start=True), self._dir("run"))
        self.assertEqual(len(result.reports), 2)
        self.assertTrue(os.path.isfile(os.path.join(result.run_dir, "pretrain_round001.ckpt")))

    def test_file_dataset(self):
        rng = np.random.default_rng(0)
        records = [IQRecord(np.exp(1j * rng.uniform(0, 6.3, 64)).astype(np.complex64), emitter_truth=i % 2)
                   for i in range(12)]
        path = self._dir("data.iq")
        save_iq_file(records, path)
        config = tiny_config(dataset=path, rounds=1)
        pools = build_pools(config)
        self.assertEqual(len(pools.test), 4)
        self.assertEqual(len(pools.labeled), 2)
        result = run_experiment(config, self._dir("run"))
        self.assertEqual([r.labeled_count for r in result.reports], [2, 4])

    def test_file_labels_must_fit_emitters(self):
        path = self._dir("data.iq")
        save_iq_file([IQRecord(np.ones(64), emitter_truth=i % 3) for i in range(9)], path)
        with self.assertRaises(ConfigurationError):
            build_pools(tiny_config(dataset=path))

    def test_negative_file_labels_are_rejected(self):
        path = self._dir("data.iq")
        save_iq_file([IQRecord(np.ones(64), emitter_truth=(i % 2) - 1) for i in range(12)], path)
        with self.assertRaises(ConfigurationError) as ctx:
            build_pools(tiny_config(dataset=path))
        self.assertIn("[-1]", str(ctx.exception))


class TestEvaluationAndAudit(unittest.TestCase):

    def test_evaluate_confusion(self):
        config = tiny_config()
        pools = build_pools(config)
        params = init_network(Architecture(2, 64), np.random.default_rng(0))
        result = evaluate(params, pools.test, config.angles[0])
        self.assertEqual(result.confusion.shape, (2, 2))
        self.assertEqual(int(result.confusion.sum()), len(pools.test))
        self.assertAlmostEqual(result.accuracy, np.trace(result.confusion) / len(pools.test))

    def test_audit_detects_leak(self):
        leaked = IQRecord(np.ones(64), emitter_truth=0, record_id=5)
        pools = DatasetPools(labeled=[], unlabeled=[leaked], test=[leaked.revealed()])
        with self.assertRaises(SelectionError):
            _audit_test_isolation(pools, {5}, 1)


class TestReport(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def test_curves_and_alpha_sweep(self):
        for alpha in (0.0, 1.0):
            for seed in (1, 2):
                run_experiment(tiny_config(rounds=1, alpha=alpha, seed=seed, strategy="random"),
                               os.path.join(self.root, f"a{alpha}-s{seed}"))
        summary = report(self.root)
        self.assertEqual(len(summary.run_dirs), 4)
        self.assertEqual(len(summary.curves), 2)
        for points in summary.curves.values():
            self.assertEqual([p.runs for p in points], [2, 2])
            self.assertEqual([p.labeled_count for p in points], [2, 4])
        self.assertTrue(os.path.isfile(summary.curves_path))
        self.assertTrue(os.path.isfile(summary.alpha_sweep_path))
        self.assertEqual(len(read_csv(summary.alpha_sweep_path)), 2)

    def test_single_alpha_has_no_sweep_file(self):
        run_experiment(tiny_config(rounds=0), os.path.join(self.root, "only"))
        summary = report(self.root)
        self.assertIsNone(summary.alpha_sweep_path)
        self.assertEqual(len(read_csv(summary.curves_path)), 1)

    def test_missing_round_file_is_listed(self):
        run_dir = os.path.join(self.root, "broken")
        run_experiment(tiny_config(rounds=1), run_dir)
        os.remove(os.path.join(run_dir, "round_001.csv"))
        with self.assertRaises(ReportError) as ctx:
            report(self.root)
        self.assertEqual(ctx.exception.missing, ["round_001.csv"])

    def test_empty_directory(self):
        with self.assertRaises(ReportError):
            report(self.root)


if __name__ == "__main__":
    unittest.main()
