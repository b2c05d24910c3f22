import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diffspot import data as D
from diffspot.config import default_config, toy_config
from diffspot.engine import init_state, train


def mini_config(manifest: str = "", out_dir: str = "runs/mini") -> dict:
    """Smallest workable configuration (32 px) for fast plumbing tests."""
    cfg = default_config()
    cfg["seed"] = 7
    cfg["out_dir"] = out_dir
    cfg["model"]["semantic"] = {
        "depth": 2, "width": 32, "patch_size": 16, "input_size": 32, "heads": 4, "mlp_ratio": 2.0,
    }
    cfg["model"]["text"] = {"depth": 1, "width": 32, "heads": 4, "mlp_ratio": 2.0}
    cfg["model"]["spatial"] = {
        "depth": 2, "width": 32, "patch_size": 4, "input_size": 32, "heads": 4, "mlp_ratio": 2.0,
    }
    cfg["model"]["prompt_length"] = 4
    cfg["model"]["fusion_plan"] = [[1, 1], [2, 2]]
    cfg["model"]["attention_heads"] = 4
    cfg["model"]["decoder"] = {"scales": [0.5, 2.0, 4.0], "channels": 8}
    cfg["training"].update(batch_size=4, learning_rate=1.0e-3, epochs=2, checkpoint_every=1)
    cfg["data"]["train_manifest"] = manifest
    cfg["data"]["eval_manifest"] = manifest
    cfg["data"]["augment"].update(
        blur_prob=0.0, jpeg_prob=0.0, scale_range=[1.0, 1.0], hflip_prob=0.5, vflip_prob=0.5,
        crop_size=32, clip_input_size=32,
    )
    cfg["evaluation"]["split"] = "train"
    return cfg


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("fixtures64")
    D.make_fixtures(out, n=16, size=64, rng=7)
    return out


@pytest.fixture(scope="session")
def fixture_manifest(fixture_dir) -> D.Manifest:
    return D.load_manifest(fixture_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def mini_fixture_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("fixtures32")
    D.make_fixtures(out, n=8, size=32, rng=11)
    return out


@pytest.fixture(scope="session")
def mini_fixture_manifest(mini_fixture_dir) -> D.Manifest:
    return D.load_manifest(mini_fixture_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def mini_state(mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    return init_state(cfg)


@pytest.fixture(scope="session")
def toy_untrained_state(fixture_dir):
    cfg = toy_config(str(fixture_dir / "manifest.jsonl"))
    return init_state(cfg)


@pytest.fixture(scope="session")
def overfit_run(fixture_dir, tmp_path_factory):
    """The desk-scale overfit training run, shared across test modules.

    Returns (state, history, out_dir, wall_seconds, config).
    """
    out = tmp_path_factory.mktemp("overfit_run")
    cfg = toy_config(str(fixture_dir / "manifest.jsonl"), out_dir=str(out))
    manifest = D.load_manifest(fixture_dir / "manifest.jsonl")
    t0 = time.monotonic()
    state, history = train(manifest, cfg, out_dir=out)
    elapsed = time.monotonic() - t0
    return state, history, out, elapsed, cfg
