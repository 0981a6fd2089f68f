import csv
import math
import os
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from data_synth_io import ScenePair, gen_hsi, gen_sensitivity, project_rgb
from hprn_config import HPRNConfig, TrainConfig
from hprn_errors import ContractError, DimensionError, NonFiniteLossError
from hprn_model import HPRN
from loss_sopc import LossBreakdown
from tensor_engine import Tensor
from trainer import (
    LOG_COLUMNS,
    OptimizerState,
    PatchSampler,
    PrefetchLoader,
    adam_step,
    evaluate_scenes,
    grad_check,
    load_model,
    poly_lr,
    relative_error,
    save_model,
    train_loop,
)


def tiny_model_config(**changes) -> HPRNConfig:
    values = dict(bands=4, channels=4, n_mrb=1, tcrm_r=2, tcrm_grid=(2, 2), tcrm_heads=2,
                  ssrm_groups=2, ssrm_scales=(2,), seed=0)
    values.update(changes)
    return HPRNConfig(**values).validate()


def tiny_scenes(count: int, size: int = 16, bands: int = 4, offset: int = 0):
    phi = gen_sensitivity(bands, seed=1)
    scenes = []
    for i in range(count):
        cube = gen_hsi(size, size, bands, seed=offset + i)
        scenes.append(ScenePair(f"scene_{offset + i:03d}", project_rgb(cube, phi), cube))
    return scenes


class TestAdam(unittest.TestCase):
    def test_three_steps_match_hand_computation(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimizerState.zeros([("w", w)])
        lr, b1, b2, eps = 0.1, 0.9, 0.99, 1e-8
        m = v = 0.0
        expected = 1.0
        for t, g in enumerate([0.1, -0.2, 0.3], start=1):
            adam_step({"w": w}, {"w": np.array([g])}, state, lr, b1, b2, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            self.assertAlmostEqual(w.data[0], expected, places=12)
        self.assertEqual(state.t, 3)

    def test_first_step_moves_by_lr(self):
        w = Tensor(np.array([0.5, -0.5]), requires_grad=True)
        state = OptimizerState.zeros([("w", w)])
        adam_step({"w": w}, {"w": np.array([2.0, -3.0])}, state, lr=0.01)
        np.testing.assert_allclose(w.data, [0.49, -0.49], atol=1e-8)

    def test_constant_gradient_moves_against_sign(self):
        w = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        state = OptimizerState.zeros([("w", w)])
        previous = w.data.copy()
        for _ in range(10):
            adam_step({"w": w}, {"w": np.array([0.5, -0.5])}, state, lr=0.01)
            self.assertLess(w.data[0], previous[0])
            self.assertGreater(w.data[1], previous[1])
            previous = w.data.copy()

    def test_zero_gradient_keeps_parameters(self):
        w = Tensor(np.array([0.3, 0.7]), requires_grad=True)
        state = OptimizerState.zeros([("w", w)])
        adam_step({"w": w}, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(w.data, [0.3, 0.7])

    def test_shape_mismatch(self):
        w = Tensor(np.zeros(2), requires_grad=True)
        state = OptimizerState.zeros([("w", w)])
        with self.assertRaises(DimensionError):
            adam_step({"w": w}, {"w": np.zeros(3)}, state, lr=0.1)


class TestSchedule(unittest.TestCase):
    def test_values(self):
        self.assertAlmostEqual(poly_lr(0, 100, 1e-3, 1.5), 1e-3)
        self.assertAlmostEqual(poly_lr(50, 100, 1e-3, 1.5), 1e-3 * 0.5 ** 1.5)
        self.assertEqual(poly_lr(100, 100, 1e-3, 1.5), 0.0)
        self.assertEqual(poly_lr(150, 100, 1e-3, 1.5), 0.0)

    def test_monotone(self):
        rates = [poly_lr(t, 20, 1.2e-4, 1.5) for t in range(21)]
        self.assertTrue(all(a > b for a, b in zip(rates[:-1], rates[1:])))

    def test_errors(self):
        with self.assertRaises(ContractError):
            poly_lr(0, 0, 1e-3, 1.5)
        with self.assertRaises(ContractError):
            poly_lr(-1, 10, 1e-3, 1.5)


class TestSampling(unittest.TestCase):
    def setUp(self):
        self.scenes = tiny_scenes(3)
        self.model_cfg = tiny_model_config()
        self.train_cfg = TrainConfig(batch_size=2, patch_size=8)

    def test_batches_depend_only_on_seed_and_step(self):
        a = PatchSampler(self.scenes, self.model_cfg, self.train_cfg)
        b = PatchSampler(self.scenes, self.model_cfg, self.train_cfg)
        for first, second in zip(a.sample(3), b.sample(3)):
            self.assertEqual(first.scene_id, second.scene_id)
            np.testing.assert_array_equal(first.rgb, second.rgb)
            np.testing.assert_array_equal(first.hsi, second.hsi)
        self.assertEqual(len(a.sample(4)), 2)

    def test_label_cache_hit(self):
        sampler = PatchSampler(self.scenes, self.model_cfg, self.train_cfg)
        first = sampler.sample(7)[0].label_maps
        self.assertIs(sampler.sample(7)[0].label_maps, first)
        self.assertEqual(first[0].shape, (8, 8))

    def test_prefetch_matches_direct_sampling(self):
        sampler = PatchSampler(self.scenes, self.model_cfg, self.train_cfg)
        loader = PrefetchLoader(sampler, 0, 3, depth=2)
        for step in range(3):
            for fetched, direct in zip(loader.get(step), sampler.sample(step)):
                np.testing.assert_array_equal(fetched.rgb, direct.rgb)
        loader.close()

    def test_close_stops_a_blocked_producer(self):
        sampler = PatchSampler(self.scenes, self.model_cfg, self.train_cfg)
        loader = PrefetchLoader(sampler, 0, 50, depth=1)
        loader.get(0)
        loader.close()
        self.assertFalse(loader.running)

    def test_errors(self):
        with self.assertRaises(ContractError):
            PatchSampler([], self.model_cfg, self.train_cfg)
        with self.assertRaises(ContractError):
            PatchSampler(self.scenes, self.model_cfg, TrainConfig(patch_size=32))


class TestTrainLoop(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.train_scenes = tiny_scenes(2)
        self.val_scenes = tiny_scenes(1, offset=10)
        self.model_cfg = tiny_model_config()

    def tearDown(self):
        self.tmp.cleanup()

    def train_config(self, name: str, **changes) -> TrainConfig:
        values = dict(epochs=2, steps_per_epoch=2, batch_size=1, patch_size=8, precision="float64",
                      run_dir=os.path.join(self.tmp.name, name))
        values.update(changes)
        return TrainConfig(**values).validate()

    def test_run_writes_log_and_checkpoints(self):
        cfg = self.train_config("basic")
        result = train_loop(HPRN(self.model_cfg), self.train_scenes, self.val_scenes, self.model_cfg, cfg,
                            show_progress=False)
        self.assertEqual(result.steps, 4)
        self.assertEqual(len(result.losses), 4)
        self.assertLessEqual(result.best_val_mrae, result.last_val_mrae)
        for path in (result.best_checkpoint, result.last_checkpoint, os.path.join(cfg.run_dir, "config.txt")):
            self.assertTrue(os.path.exists(path), path)

        with open(result.log_path) as f:
            rows = list(csv.DictReader(f))
        self.assertEqual(list(rows[0].keys()), LOG_COLUMNS)
        self.assertEqual([r["step"] for r in rows], ["0", "1", "2", "3"])
        self.assertEqual([r["epoch"] for r in rows], ["1", "1", "2", "2"])
        self.assertEqual(rows[0]["val_mrae"], "")
        self.assertTrue(math.isfinite(float(rows[1]["val_mrae"])))

    def test_same_seed_gives_identical_logs(self):
        paths = []
        for name in ("first", "second"):
            result = train_loop(HPRN(self.model_cfg), self.train_scenes, self.val_scenes, self.model_cfg,
                                self.train_config(name), show_progress=False)
            paths.append(result.log_path)
        with open(paths[0]) as a, open(paths[1]) as b:
            self.assertEqual(a.read(), b.read())

    def test_resume_is_bit_exact_in_float64(self):
        straight = HPRN(self.model_cfg)
        train_loop(straight, self.train_scenes, self.val_scenes, self.model_cfg, self.train_config("straight"),
                   show_progress=False)

        cfg = self.train_config("split", prefetch=2)
        first = HPRN(self.model_cfg)
        train_loop(first, self.train_scenes, self.val_scenes, self.model_cfg, cfg, max_steps=2, show_progress=False)
        resumed = HPRN(self.model_cfg)
        result = train_loop(resumed, self.train_scenes, self.val_scenes, self.model_cfg, cfg, resume=True,
                            show_progress=False)

        for (name, a), (_, b) in zip(straight.named_parameters(), resumed.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)
        with open(result.log_path) as f:
            self.assertEqual(len(list(csv.DictReader(f))), 4)

    def test_non_finite_loss_dumps_diagnostics(self):
        nan = Tensor(np.array(np.nan))
        broken = LossBreakdown(nan, nan, nan, 2.0)
        cfg = self.train_config("nan")
        with patch("trainer.batch_loss", return_value=broken):
            with self.assertRaises(NonFiniteLossError) as ctx:
                train_loop(HPRN(self.model_cfg), self.train_scenes, [], self.model_cfg, cfg, show_progress=False)
        self.assertEqual(ctx.exception.diagnostics["step"], 0)
        self.assertTrue(os.path.exists(os.path.join(cfg.run_dir, "diagnostics.json")))

    def test_failed_run_stops_prefetching(self):
        created = []

        class RecordingLoader(PrefetchLoader):
            def __init__(self, *args, **kwargs):
                super().__init__(*args, **kwargs)
                created.append(self)

        nan = Tensor(np.array(np.nan))
        cfg = self.train_config("nan_prefetch", prefetch=2)
        with patch("trainer.batch_loss", return_value=LossBreakdown(nan, nan, nan, 2.0)), \
                patch("trainer.PrefetchLoader", RecordingLoader):
            with self.assertRaises(NonFiniteLossError):
                train_loop(HPRN(self.model_cfg), self.train_scenes, [], self.model_cfg, cfg, show_progress=False)
        self.assertEqual(len(created), 1)
        self.assertFalse(created[0].running)

    def test_checkpoint_reload_gives_same_metrics(self):
        model = HPRN(self.model_cfg, np.float32)
        path = os.path.join(self.tmp.name, "model.ckpt")
        save_model(model, path)
        reloaded = load_model(path, self.model_cfg, "float32")
        a = evaluate_scenes(model, self.val_scenes)[0][1]
        b = evaluate_scenes(reloaded, self.val_scenes)[0][1]
        self.assertEqual(a.mrae, b.mrae)


@unittest.skipUnless(os.getenv("HPRN_RUN_SLOW") == "1", "set HPRN_RUN_SLOW=1 for long training runs")
class TestLongRuns(unittest.TestCase):
    """Desk-scale training runs: four 64x64 scenes, 32 channels, two blocks."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.train_scenes = tiny_scenes(4, size=64, bands=31)
        self.val_scenes = tiny_scenes(2, size=64, bands=31, offset=100)

    def tearDown(self):
        self.tmp.cleanup()

    def run_training(self, name: str, steps: int, **model_changes):
        model_cfg = HPRNConfig(channels=32, n_mrb=2, **model_changes).validate()
        train_cfg = TrainConfig(epochs=20, steps_per_epoch=steps // 20, batch_size=1, patch_size=64,
                                run_dir=os.path.join(self.tmp.name, name)).validate()
        model = HPRN(model_cfg, np.float32)
        result = train_loop(model, self.train_scenes, self.val_scenes, model_cfg, train_cfg, show_progress=False)
        return model, result

    def test_overfit_smoke(self):
        model, result = self.run_training("overfit", 2000)
        self.assertLess(np.mean(result.losses[-20:]), 0.2 * np.mean(result.losses[:20]))
        train_mrae = np.mean([r.mrae for _, r in evaluate_scenes(model, self.train_scenes)])
        self.assertLess(train_mrae, 0.05)
        self.assertLess(result.best_val_mrae, 0.25)

    def test_sopc_does_not_hurt_sam(self):
        with_sopc, _ = self.run_training("tau2", 1000, sopc_tau=2.0)
        without_sopc, _ = self.run_training("tau0", 1000, sopc_tau=0.0)
        sam_with = np.mean([r.sam_degrees for _, r in evaluate_scenes(with_sopc, self.val_scenes)])
        sam_without = np.mean([r.sam_degrees for _, r in evaluate_scenes(without_sopc, self.val_scenes)])
        self.assertLessEqual(sam_with, 1.1 * sam_without)


class TestGradCheck(unittest.TestCase):
    def test_relative_error(self):
        self.assertEqual(relative_error(1.0, 1.0), 0.0)
        self.assertAlmostEqual(relative_error(1.0, 0.5), 0.5)
        self.assertAlmostEqual(relative_error(0.0, 1e-9), 1e-3)

    def test_default_step_is_1e4(self):
        default = grad_check(tiny_model_config(), n_params=5, patch=8)
        explicit = grad_check(tiny_model_config(), n_params=5, patch=8, epsilon=1e-4)
        self.assertEqual([e.numeric for e in default.entries], [e.numeric for e in explicit.entries])

    def test_tiny_network_passes(self):
        report = grad_check(tiny_model_config(), n_params=20, patch=8)
        self.assertEqual(len(report.entries), 20)
        self.assertTrue(report.passed, report.summary())
        self.assertIn("PASS", report.summary())

    def test_reference_network_passes(self):
        cfg = HPRNConfig(channels=8, n_mrb=1, ssrm_groups=4, ssrm_scales=(2,)).validate()
        report = grad_check(cfg, n_params=100, patch=16)
        self.assertGreaterEqual(len(report.entries), 100)
        self.assertLess(report.max_rel_error, 1e-4, report.summary())
        self.assertIsNotNone(report.worst.parameter)


if __name__ == '__main__':
    unittest.main()
