import os
import tempfile
import unittest
from dataclasses import replace

from config import (
    DEFAULTS,
    build_run_config,
    config_hash,
    merge_values,
    read_config_file,
)
from errors import ConfigError


class ConfigTests(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.addCleanup(self.temp_dir.cleanup)
        self.config_path = os.path.join(self.temp_dir.name, "run.conf")

    def write_config(self, content: str) -> str:
        with open(self.config_path, "w", encoding="utf-8") as handle:
            handle.write(content)
        return self.config_path

    def test_defaults_apply_without_overrides(self):
        cfg = build_run_config("estimate", merge_values({}, {}, environ={}))

        self.assertEqual(cfg.folds, 3)
        self.assertEqual(cfg.level, 0.95)
        self.assertEqual(cfg.variance, "null_imposed")
        self.assertEqual(cfg.spec_l.kind, "lasso")
        self.assertTrue(cfg.spec_l.dictionary)

    def test_precedence_is_defaults_file_environment_command_line(self):
        file_values = read_config_file(
            self.write_config("estimate.seed=1\nestimate.threads=2\nestimate.folds=4\n")
        )
        environ = {"PIVDML_SEED": "5", "PIVDML_THREADS": "3"}

        from_file = build_run_config("estimate", merge_values(file_values, {}, environ={}))
        from_env = build_run_config("estimate", merge_values(file_values, {}, environ))
        from_cli = build_run_config(
            "estimate", merge_values(file_values, {"estimate.seed": "9", "estimate.threads": None}, environ)
        )

        self.assertEqual((from_file.seed, from_file.threads, from_file.folds), (1, 2, 4))
        self.assertEqual((from_env.seed, from_env.threads), (5, 3))
        self.assertEqual((from_cli.seed, from_cli.threads), (9, 3))

    def test_unknown_key_is_rejected(self):
        with self.assertRaisesRegex(ConfigError, "unknown config key: estimate_folds"):
            read_config_file(self.write_config("estimate_folds=3\n"))

    def test_missing_file_is_reported(self):
        with self.assertRaisesRegex(ConfigError, "config file not found"):
            read_config_file(os.path.join(self.temp_dir.name, "absent.conf"))

    def test_single_fold_is_rejected(self):
        with self.assertRaisesRegex(ConfigError, "K ≥ 2 required"):
            build_run_config("estimate", merge_values({}, {"estimate.folds": "1"}, environ={}))

    def test_non_numeric_value_names_its_key(self):
        with self.assertRaisesRegex(ConfigError, "estimate.level"):
            build_run_config("estimate", merge_values({}, {"estimate.level": "high"}, environ={}))

    def test_invalid_thread_environment_is_rejected(self):
        with self.assertRaises(ConfigError):
            merge_values({}, {}, environ={"PIVDML_THREADS": "0"})

    def test_missing_roles_are_named(self):
        values = merge_values({}, {"data.path": "panel.csv", "data.unit": "id"}, environ={})

        with self.assertRaisesRegex(ConfigError, "time, y, d, z"):
            build_run_config("estimate", values).require_roles()

    def test_column_lists_split_on_commas(self):
        cfg = build_run_config(
            "estimate", merge_values({}, {"data.z": "z1, z2", "data.x": "a,b,c"}, environ={})
        )

        self.assertEqual(cfg.z, ("z1", "z2"))
        self.assertEqual(cfg.x, ("a", "b", "c"))

    def test_learner_settings_can_differ_per_target(self):
        values = merge_values(
            {"learner.kind": "boosting", "learner.nrounds": "200", "learner.m.kind": "mlp"},
            {},
            environ={},
        )

        cfg = build_run_config("estimate", values)

        self.assertEqual(cfg.spec_for("l").kind, "boosting")
        self.assertEqual(cfg.spec_for("r").nrounds, 200)
        self.assertEqual(cfg.spec_for("m").kind, "mlp")

    def test_dictionary_can_be_switched_off(self):
        cfg = build_run_config("estimate", merge_values({"learner.dictionary": "false"}, {}, environ={}))

        self.assertFalse(cfg.spec_m.dictionary)

    def test_learner_seed_follows_run_seed(self):
        cfg = build_run_config("estimate", merge_values({}, {"estimate.seed": "12"}, environ={}))

        self.assertEqual(cfg.spec_l.seed, 12)

    def test_unknown_estimator_is_rejected(self):
        with self.assertRaisesRegex(ConfigError, "dml-forest"):
            build_run_config(
                "simulate", merge_values({}, {"simulate.estimators": "2sls,dml-forest"}, environ={})
            )

    def test_hash_ignores_threads_and_output(self):
        cfg = build_run_config("estimate", merge_values({}, {}, environ={}))

        self.assertEqual(len(config_hash(cfg)), 64)
        self.assertEqual(config_hash(cfg), config_hash(replace(cfg, threads=8, out="r.json")))
        self.assertNotEqual(config_hash(cfg), config_hash(replace(cfg, seed=1)))

    def test_defaults_cover_every_section_used_by_commands(self):
        sections = {key.split(".", 1)[0] for key in DEFAULTS}

        self.assertEqual(sections, {"estimate", "simulate", "tune"})


if __name__ == "__main__":
    unittest.main()
