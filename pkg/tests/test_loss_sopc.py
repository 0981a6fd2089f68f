import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from data_synth_io import SpectralCube
from hprn_errors import ContractError, DimensionError
from loss_sopc import batch_loss, covariance_matrix, l1_loss, sopc_loss, total_loss
from tensor_engine import Tensor


class TestCovariance(unittest.TestCase):
    def test_two_band_two_pixel_example(self):
        cube = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
        np.testing.assert_allclose(covariance_matrix(cube).data, [[0.25, 0.25], [0.25, 0.25]])

    def test_matches_numpy_population_covariance(self):
        cube = np.random.default_rng(0).uniform(size=(5, 6, 7))
        expected = np.cov(cube.reshape(5, -1), bias=True)
        np.testing.assert_allclose(covariance_matrix(cube).data, expected, atol=1e-12)

    def test_constant_cube_and_symmetry(self):
        np.testing.assert_allclose(covariance_matrix(np.full((3, 4, 4), 0.3)).data, np.zeros((3, 3)), atol=1e-15)
        x = covariance_matrix(np.random.default_rng(1).uniform(size=(4, 5, 5))).data
        np.testing.assert_allclose(x, x.T)
        self.assertTrue(np.all(np.diag(x) >= 0))

    def test_accepts_spectral_cube(self):
        values = np.random.default_rng(2).uniform(size=(3, 4, 4))
        np.testing.assert_allclose(covariance_matrix(SpectralCube(values)).data, covariance_matrix(values).data)

    def test_errors(self):
        with self.assertRaises(ContractError):
            covariance_matrix(np.ones((3, 1, 1)))
        with self.assertRaises(DimensionError):
            covariance_matrix(np.ones((3, 4)))


class TestLoss(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_identical_cubes_have_zero_loss(self):
        cube = self.rng.uniform(size=(4, 5, 5))
        parts = total_loss(cube, cube).as_floats()
        self.assertEqual(parts, {"l1": 0.0, "sopc": 0.0, "total": 0.0})

    def test_sopc_ignores_per_band_offsets(self):
        gt = self.rng.uniform(size=(4, 5, 5))
        shifted = gt + self.rng.normal(size=(4, 1, 1))
        self.assertAlmostEqual(sopc_loss(shifted, gt).item(), 0.0, places=12)
        self.assertGreater(l1_loss(shifted, gt).item(), 0.0)

    def test_tau_weights_sopc(self):
        pred = self.rng.uniform(size=(3, 4, 4))
        gt = self.rng.uniform(size=(3, 4, 4))
        no_sopc = total_loss(pred, gt, tau=0.0)
        self.assertEqual(no_sopc.total.item(), no_sopc.l1.item())
        weighted = total_loss(pred, gt, tau=2.0)
        self.assertAlmostEqual(weighted.total.item(), weighted.l1.item() + 2.0 * weighted.sopc.item())
        with self.assertRaises(ContractError):
            total_loss(pred, gt, tau=-1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            total_loss(np.ones((3, 4, 4)), np.ones((3, 4, 5)))

    def test_gradient_matches_finite_differences(self):
        pred_data = self.rng.uniform(size=(3, 3, 3))
        gt = self.rng.uniform(size=(3, 3, 3))
        pred = Tensor(pred_data, requires_grad=True)
        total_loss(pred, gt, tau=2.0).total.backward()

        def value():
            return total_loss(pred_data, gt, tau=2.0).total.item()

        eps = 1e-6
        for idx in range(0, pred_data.size, 4):
            orig = pred_data.flat[idx]
            pred_data.flat[idx] = orig + eps
            plus = value()
            pred_data.flat[idx] = orig - eps
            minus = value()
            pred_data.flat[idx] = orig
            self.assertAlmostEqual(pred.grad.flat[idx], (plus - minus) / (2 * eps), places=5)

    def test_batch_loss_is_mean_of_samples(self):
        preds = [self.rng.uniform(size=(3, 4, 4)) for _ in range(3)]
        gts = [self.rng.uniform(size=(3, 4, 4)) for _ in range(3)]
        batch = batch_loss(preds, gts, tau=1.5).as_floats()
        singles = [total_loss(p, g, tau=1.5).as_floats() for p, g in zip(preds, gts)]
        for key in ("l1", "sopc", "total"):
            self.assertAlmostEqual(batch[key], np.mean([s[key] for s in singles]))
        with self.assertRaises(ContractError):
            batch_loss([], [])


if __name__ == '__main__':
    unittest.main()
