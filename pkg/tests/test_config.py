"""
Tests for the run configuration module.

Run with: python tests/test_config.py
"""

import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import (
    DEFAULT_CONFIG_PATH,
    DEFAULT_OUTPUT_DIR,
    ENV_CONFIG,
    ENV_OUT,
    ENV_SEED,
    RunConfig,
    load_config,
    read_config_file,
)


@contextmanager
def environment(**values):
    """Temporarily set (or with None, unset) environment variables."""
    saved = {key: os.environ.get(key) for key in values}
    try:
        for key, value in values.items():
            if value is None:
                os.environ.pop(key, None)
            else:
                os.environ[key] = value
        yield
    finally:
        for key, value in saved.items():
            if value is None:
                os.environ.pop(key, None)
            else:
                os.environ[key] = value


CLEAN = {ENV_CONFIG: None, ENV_OUT: None, ENV_SEED: None}


def write_toml(directory: str, text: str) -> Path:
    path = Path(directory) / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


class TestDefaults:
    """Tests for built-in defaults."""

    def test_model_defaults(self):
        cfg = RunConfig()
        assert cfg.train.learning_rate == 1e-6
        assert cfg.train.G == 8
        assert cfg.train.record_wall_time is False
        assert cfg.curriculum.ratios == (0.5, 0.25, 0.25)
        assert cfg.loop.seed_offset == 10000
        assert cfg.output_dir == DEFAULT_OUTPUT_DIR
        print("  OK Defaults")

    def test_no_file_uses_shipped_toml(self):
        with environment(**CLEAN):
            cfg = load_config()
        assert cfg == load_config(DEFAULT_CONFIG_PATH)
        assert cfg.train.learning_rate == 0.5
        assert cfg.train.record_wall_time is False
        print("  OK No --config falls back to config/default.toml")

    def test_default_toml(self):
        with environment(**CLEAN):
            cfg = load_config(DEFAULT_CONFIG_PATH)
        assert cfg.train.learning_rate == 0.5
        assert cfg.env.horizon == 30
        assert cfg.seeds == [0, 1, 2]
        assert cfg.train.record_wall_time is False
        print("  OK Shipped default.toml loads")

    def test_frozen(self):
        cfg = RunConfig()
        try:
            cfg.rounds = 9
            assert False, "Should have raised an error"
        except ValueError:
            print("  OK Config is immutable")


class TestFile:
    """Tests for TOML parsing."""

    def test_sections(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_toml(tmpdir, "[run]\nrounds = 2\n\n[reward]\nepsilon = 20.0\n")
            data = read_config_file(path)
        assert data == {"rounds": 2, "reward": {"epsilon": 20.0}}
        print("  OK [run] keys become top-level fields")

    def test_unknown_section(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_toml(tmpdir, "[mystery]\nx = 1\n")
            try:
                read_config_file(path)
                assert False, "Should have raised ValueError"
            except ValueError:
                print("  OK Unknown section rejected")

    def test_invalid_toml(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_toml(tmpdir, "[run\nrounds = \n")
            try:
                read_config_file(path)
                assert False, "Should have raised ValueError"
            except ValueError:
                print("  OK TOML syntax error rejected")

    def test_missing_file(self):
        try:
            read_config_file("/nonexistent/run.toml")
            assert False, "Should have raised FileNotFoundError"
        except FileNotFoundError:
            print("  OK Missing file rejected")

    def test_invalid_value(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_toml(tmpdir, "[reward]\nepsilon = -1.0\n")
            with environment(**CLEAN):
                try:
                    load_config(path)
                    assert False, "Should have raised ValueError"
                except ValueError:
                    print("  OK Validation errors surface as ValueError")


class TestPrecedence:
    """Tests for file < environment < command line."""

    def test_environment_over_file(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_toml(tmpdir, "[train]\nseed = 3\n\n[run]\noutput_dir = \"from_file\"\n")
            with environment(**{**CLEAN, ENV_SEED: "7", ENV_OUT: "from_env"}):
                cfg = load_config(path)
        assert cfg.seed == 7
        assert cfg.output_dir == "from_env"
        print("  OK MINIDROID_* beats the file")

    def test_cli_over_environment(self):
        with environment(**{**CLEAN, ENV_SEED: "7", ENV_OUT: "from_env"}):
            cfg = load_config(seed=11, output_dir="from_cli")
        assert cfg.seed == 11
        assert cfg.output_dir == "from_cli"
        print("  OK Command line beats the environment")

    def test_config_path_from_environment(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_toml(tmpdir, "[run]\nrounds = 6\n")
            with environment(**{**CLEAN, ENV_CONFIG: str(path)}):
                cfg = load_config()
        assert cfg.rounds == 6
        print("  OK MINIDROID_CONFIG names the file")

    def test_overrides_nested(self):
        with environment(**CLEAN):
            cfg = load_config(overrides={"train": {"G": 4}, "rounds": 1})
        assert cfg.train.G == 4
        assert cfg.train.learning_rate == 0.5
        assert cfg.rounds == 1
        print("  OK Overrides merge into sections")


class TestHelpers:
    """Tests for RunConfig helpers."""

    def test_with_seed(self):
        cfg = RunConfig().with_seed(42)
        assert cfg.seed == 42
        assert RunConfig().seed == 0
        print("  OK with_seed returns a new config")

    def test_empty_seeds(self):
        try:
            RunConfig(seeds=[])
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Empty seed list rejected")

    def test_to_dict(self):
        data = RunConfig().to_dict()
        assert data["train"]["G"] == 8
        assert data["curriculum"]["balancing"] is True
        print("  OK JSON-ready dump")


def run_all_tests():
    """Run all tests and report results."""
    print("\n" + "=" * 60)
    print("Run Configuration Tests")
    print("=" * 60)

    test_classes = [
        TestDefaults,
        TestFile,
        TestPrecedence,
        TestHelpers,
    ]

    passed = 0
    failed = 0

    for test_class in test_classes:
        print(f"\n{test_class.__name__}:")

        instance = test_class()

        for method_name in dir(instance):
            if method_name.startswith("test_"):
                try:
                    getattr(instance, method_name)()
                    passed += 1
                except AssertionError as e:
                    print(f"  FAIL {method_name}: {e}")
                    failed += 1
                except Exception as e:
                    print(f"  FAIL {method_name}: Unexpected error: {e}")
                    failed += 1

    print("\n" + "=" * 60)
    print(f"Results: {passed} passed, {failed} failed")
    print("=" * 60 + "\n")

    return failed == 0


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
