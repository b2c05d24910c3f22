import copy
import json

import numpy as np
import pytest
import torch

from diffspot import data as D
from diffspot.engine import (
    _to_tensor_batch,
    frozen_digest,
    init_state,
    load_state,
    predict,
    save_state,
    train,
    training_step,
)
from diffspot.errors import CheckpointError, NumericError, ValidationError
from conftest import mini_config


def _batch_from(manifest, cfg, n=4, seed=0):
    aug = D.AugmentationConfig(
        blur_prob=0, jpeg_prob=0, scale_range=(1.0, 1.0), hflip_prob=0, vflip_prob=0,
        crop_size=cfg["model"]["spatial"]["input_size"],
        clip_input_size=cfg["model"]["semantic"]["input_size"],
    )
    samples, views = [], []
    for e in manifest.entries[:n]:
        s = D.load_sample(manifest, e)
        a, v = D.augment(s, aug, np.random.default_rng(seed))
        samples.append(a)
        views.append(v)
    return _to_tensor_batch(samples, views)


# ---------------------------------------------------------------------------
# parameter partitioning and updates
# ---------------------------------------------------------------------------


def test_zero_step_size_leaves_tunables_unchanged(mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = 0.0
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    batch = _batch_from(mini_fixture_manifest, cfg)
    training_step(state, batch)
    after = dict(state.model.named_parameters())
    for name, prev in before.items():
        assert torch.equal(prev, after[name].detach()), name


def test_frozen_digest_unchanged_after_10_steps(mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    digest0 = frozen_digest(state.model)
    batch = _batch_from(mini_fixture_manifest, cfg)
    tunable_before = {n: p.detach().clone() for n, p in state.model.tunable_parameters()}
    for _ in range(10):
        training_step(state, batch)
    assert frozen_digest(state.model) == digest0
    # and tunables did change
    changed = any(
        not torch.equal(tunable_before[n], p.detach())
        for n, p in state.model.tunable_parameters()
    )
    assert changed


def test_parameter_groups_cover_model(mini_state):
    model = mini_state.model
    frozen = {n for n, _ in model.frozen_parameters()}
    tunable = {n for n, _ in model.tunable_parameters()}
    assert frozen.isdisjoint(tunable)
    assert frozen | tunable == {n for n, _ in model.named_parameters()}
    assert all(n.startswith(("semantic.", "text.")) for n in frozen)
    prefixes = {n.split(".")[0] for n in tunable}
    assert prefixes == {"spatial", "spm", "decoder"}
    # tunable group covers prompts, vsa, vca, tvca namespaces
    assert any(n.startswith("spm.prompt.") for n in tunable)
    assert any(n.startswith("spm.vsa.") for n in tunable)
    assert any(n.startswith("spm.vca.0.") for n in tunable)
    assert any(n.startswith("spm.tvca.") for n in tunable)
    assert any(n.startswith("decoder.scale_0_5.") for n in tunable)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_requires_both_labels(tmp_path, mini_fixture_dir):
    root = tmp_path
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3)).astype(np.float32)
    D.write_image(root / "r.png", img)
    entries = [
        D.ManifestEntry(id="r", image_path="r.png", mask_path=None, label="real",
                        generator_tag="g", split="train")
    ]
    manifest = D.Manifest(entries, root)
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    with pytest.raises(ValidationError, match="each label"):
        train(manifest, cfg)


def test_train_numeric_abort_carries_step(mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    with torch.no_grad():
        state.model.spm.tvca.refine.bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="step 0"):
        train(mini_fixture_manifest, cfg, state=state)


def test_train_determinism_epoch1_loss(mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    cfg["training"]["epochs"] = 1
    _, h1 = train(mini_fixture_manifest, copy.deepcopy(cfg))
    _, h2 = train(mini_fixture_manifest, copy.deepcopy(cfg))
    assert abs(h1[0].loss - h2[0].loss) <= 1e-6


def test_train_writes_checkpoints(tmp_path, mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    cfg["training"]["epochs"] = 2
    state, history = train(mini_fixture_manifest, cfg, out_dir=tmp_path)
    assert (tmp_path / "checkpoints" / "epoch_0001.ckpt").exists()
    assert (tmp_path / "checkpoints" / "epoch_0002.ckpt").exists()
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()
    assert (tmp_path / "checkpoints" / "final.ckpt.json").exists()
    assert [h.epoch for h in history] == [1, 2]
    assert state.step == history[0].steps + history[1].steps


def test_overfit_loss_decreases(overfit_run):
    _, history, _, _, _ = overfit_run
    epoch_losses = {h.epoch: h.loss for h in history}
    assert epoch_losses[5] < epoch_losses[1]


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def test_predict_probability_normalized(mini_state):
    rng = np.random.default_rng(2)
    img = rng.random((32, 32, 3)).astype(np.float32)
    res = predict(mini_state, img)
    assert 0.0 <= res.p_fake <= 1.0
    out = mini_state.model(
        torch.from_numpy(img[None]).permute(0, 3, 1, 2),
        torch.from_numpy(img[None]).permute(0, 3, 1, 2),
    )
    probs = out.det_logits.softmax(dim=-1)
    assert abs(probs.sum().item() - 1.0) <= 1e-9
    assert abs(probs[0, 1].item() - res.p_fake) <= 1e-6


def test_predict_negative_logits_give_empty_mask(mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    with torch.no_grad():
        state.model.spm.tvca.refine.bias[1] = -10.0
    img = np.random.default_rng(3).random((32, 32, 3)).astype(np.float32)
    res = predict(state, img)
    assert np.allclose(res.mask_logits, -10.0, atol=1e-5)
    assert not res.mask_binary.any()


def test_predict_zero_init_logits_equal_bias_map(mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    img = np.random.default_rng(4).random((32, 32, 3)).astype(np.float32)
    res = predict(state, img)
    assert np.array_equal(res.mask_logits, np.zeros((32, 32), dtype=np.float32))
    with torch.no_grad():
        state.model.spm.tvca.refine.bias[1] = 0.25
    res2 = predict(state, img)
    assert np.allclose(res2.mask_logits, 0.25, atol=1e-6)


def test_predict_resizes_to_original(mini_state):
    rng = np.random.default_rng(5)
    img = rng.random((50, 70, 3)).astype(np.float32)
    res = predict(mini_state, img)
    assert res.mask_logits.shape == (50, 70)
    assert res.mask_binary.shape == (50, 70)


def test_predict_input_validation(mini_state):
    with pytest.raises(ValidationError):
        predict(mini_state, np.zeros((8, 8)))


# ---------------------------------------------------------------------------
# state roundtrip
# ---------------------------------------------------------------------------


def test_save_load_roundtrip_bitwise(tmp_path, mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    batch = _batch_from(mini_fixture_manifest, cfg)
    for _ in range(3):
        training_step(state, batch)
    path = tmp_path / "state.ckpt"
    save_state(state, path)
    loaded = load_state(path)

    sd_a = state.model.state_dict()
    sd_b = loaded.model.state_dict()
    assert set(sd_a) == set(sd_b)
    for k in sd_a:
        assert torch.equal(sd_a[k], sd_b[k]), k
    assert loaded.step == state.step
    assert loaded.epoch == state.epoch

    # probe prediction equality at 1e-12
    img = np.random.default_rng(6).random((32, 32, 3)).astype(np.float32)
    r1 = predict(state, img)
    r2 = predict(loaded, img)
    assert abs(r1.p_fake - r2.p_fake) <= 1e-12
    assert np.array_equal(r1.mask_logits, r2.mask_logits)


def test_save_load_optimizer_moments(tmp_path, mini_fixture_manifest, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    batch = _batch_from(mini_fixture_manifest, cfg)
    training_step(state, batch)
    path = tmp_path / "state.ckpt"
    save_state(state, path)
    loaded = load_state(path)

    def moments(s):
        out = {}
        names = {id(p): n for n, p in s.model.named_parameters()}
        for p, st in s.optimizer.state.items():
            out[names[id(p)]] = (st["exp_avg"].clone(), st["exp_avg_sq"].clone())
        return out

    ma, mb = moments(state), moments(loaded)
    assert set(ma) == set(mb)
    for k in ma:
        assert torch.equal(ma[k][0], mb[k][0])
        assert torch.equal(ma[k][1], mb[k][1])

    # continued training stays consistent between original and reloaded state
    training_step(state, batch)
    training_step(loaded, batch)
    for (n1, p1), (_, p2) in zip(state.model.tunable_parameters(), loaded.model.tunable_parameters()):
        assert torch.allclose(p1, p2, atol=1e-7), n1


def test_load_state_truncated(tmp_path, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    path = tmp_path / "state.ckpt"
    save_state(state, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_state(path)


def test_load_state_version_mismatch(tmp_path, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    path = tmp_path / "state.ckpt"
    save_state(state, path)
    meta = json.loads((tmp_path / "state.ckpt.json").read_text())
    meta["format_version"] = 999
    (tmp_path / "state.ckpt.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="version"):
        load_state(path)


def test_load_state_missing_sidecar(tmp_path, mini_fixture_dir):
    cfg = mini_config(str(mini_fixture_dir / "manifest.jsonl"))
    state = init_state(cfg)
    path = tmp_path / "state.ckpt"
    save_state(state, path)
    (tmp_path / "state.ckpt.json").unlink()
    with pytest.raises(CheckpointError, match="metadata"):
        load_state(path)
