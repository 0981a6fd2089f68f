import os
import sys
import tempfile
import unittest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'benchmarking'))

from ablation_runner import BASE_CONFIG, SWEEPS, VARIANTS, AblationRunner


class TestVariants(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.runner = AblationRunner(config=None, results_dir=self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_every_variant_resolves(self):
        for name in VARIANTS:
            model_cfg, train_cfg = self.runner.variant_configs(name)
            self.assertTrue(train_cfg.run_dir.endswith(name), name)
            self.assertEqual(model_cfg.channels, int(BASE_CONFIG["channels"]))

    def test_sopc_weight_sweep(self):
        taus = [self.runner.variant_configs(name)[0].sopc_tau for name in SWEEPS["tau"]]
        self.assertEqual(taus, [0.2, 0.5, 1.0, 2.0, 5.0, 10.0])
        for name in SWEEPS["tau"]:
            self.assertEqual(self.runner.variant_configs(name)[0].ssrm_groups, int(BASE_CONFIG["ssrm_groups"]))

    def test_group_size_sweep(self):
        groups = [self.runner.variant_configs(name)[0].ssrm_groups for name in SWEEPS["groups"]]
        self.assertEqual(groups, [4, 8, 16, 32, 64])
        patch = int(BASE_CONFIG["patch_size"])
        self.assertLessEqual(max(groups), patch * patch)

    def test_sweeps_only_name_known_variants(self):
        for names in SWEEPS.values():
            self.assertTrue(set(names) <= set(VARIANTS))


if __name__ == '__main__':
    unittest.main()
