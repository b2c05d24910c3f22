import math

import numpy as np
import pytest
import torch

from diffspot.errors import NumericError
from diffspot.objective import LossConfig, combined_loss, detection_loss, edge_weight_map
from helpers import finite_difference_check, morphology_band_oracle


# ---------------------------------------------------------------------------
# detection loss
# ---------------------------------------------------------------------------


def test_detection_loss_orthogonal_case():
    t_fake = torch.tensor([1.0, 0.0])
    t_real = torch.tensor([0.0, 1.0])
    g = t_fake.clone()
    loss = detection_loss(g, t_real, t_fake, torch.tensor(1), temperature=1.0)
    expected = -math.log(math.e / (math.e + 1.0))
    assert abs(loss.item() - expected) < 1e-6
    assert abs(expected - 0.3133) < 1e-4


def test_detection_loss_tie_is_ln2():
    t_real = torch.tensor([1.0, 0.0])
    t_fake = torch.tensor([0.0, 1.0])
    g = torch.tensor([1.0, 1.0]) / math.sqrt(2.0)  # equidistant
    for label in (0, 1):
        loss = detection_loss(g, t_real, t_fake, torch.tensor(label), temperature=1.0)
        assert abs(loss.item() - math.log(2.0)) < 1e-6


def test_detection_loss_sharp_temperature_limit():
    t_real = torch.tensor([1.0, 0.0])
    t_fake = torch.tensor([0.0, 1.0])
    g = torch.tensor([0.1, 0.9])
    g = g / g.norm()  # strictly closer to fake
    losses = [
        detection_loss(g, t_real, t_fake, torch.tensor(1), temperature=tau).item()
        for tau in (0.5, 0.1, 0.02, 0.004)
    ]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
    assert losses[-1] < 1e-6


def test_detection_loss_batched():
    torch.manual_seed(0)
    g = torch.randn(5, 8)
    g = g / g.norm(dim=-1, keepdim=True)
    t = torch.randn(2, 8)
    t = t / t.norm(dim=-1, keepdim=True)
    labels = torch.tensor([0, 1, 0, 1, 1])
    loss = detection_loss(g, t[0], t[1], labels, temperature=0.07)
    per = [
        detection_loss(g[i], t[0], t[1], torch.tensor(labels[i].item()), 0.07).item()
        for i in range(5)
    ]
    assert abs(loss.item() - np.mean(per)) < 1e-6


# ---------------------------------------------------------------------------
# edge weight map
# ---------------------------------------------------------------------------


def test_edge_weights_all_zero_mask():
    w = edge_weight_map(torch.zeros(6, 7), radius=1, gain=4.0)
    assert torch.equal(w, torch.ones(6, 7))


def test_edge_weights_centered_block_band24():
    mask = torch.zeros(5, 5)
    mask[1:4, 1:4] = 1.0
    w = edge_weight_map(mask, radius=1, gain=4.0)
    band = (w > 1).sum().item()
    assert band == 24  # dilation has 25 ones, erosion 1
    assert torch.allclose(w[w > 1], torch.full((24,), 4.0))
    assert w[2, 2].item() == 1.0  # eroded interior keeps weight 1


def test_edge_weights_all_ones_mask_uniform():
    w = edge_weight_map(torch.ones(6, 6), radius=1, gain=4.0)
    assert torch.equal(w, torch.ones(6, 6))


def test_edge_weights_match_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for radius in (1, 2, 3):
        mask = (rng.random((9, 11)) > 0.6).astype(np.float64)
        got = edge_weight_map(torch.from_numpy(mask), radius=radius, gain=3.0).numpy()
        band = morphology_band_oracle(mask, radius)
        expected = 1.0 + 2.0 * band
        assert np.allclose(got, expected, atol=1e-12)


def test_edge_weights_batched():
    mask = torch.zeros(2, 5, 5)
    mask[0, 1:4, 1:4] = 1.0
    w = edge_weight_map(mask, radius=1, gain=2.0)
    assert w.shape == (2, 5, 5)
    assert torch.equal(w[1], torch.ones(5, 5))


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------


def _unit(v):
    t = torch.tensor(v, dtype=torch.float32)
    return t / t.norm()


def test_combined_bce_half_probability():
    logits = torch.zeros(4, 4)  # sigmoid = 0.5 everywhere
    mask = torch.zeros(4, 4)
    mask[0, 0] = 1.0
    cfg = LossConfig()
    _, parts = combined_loss(logits, mask, _unit([1.0, 0.0]), _unit([1.0, 0.0]), _unit([0.0, 1.0]),
                             torch.tensor(0), cfg)
    assert abs(parts["bce"].item() - math.log(2.0)) < 1e-6


def test_combined_edge_weight_zero_exact():
    torch.manual_seed(2)
    logits = torch.randn(6, 6)
    mask = torch.zeros(6, 6)
    mask[2:5, 2:5] = 1.0
    g, tr, tf = _unit([1.0, 1.0]), _unit([1.0, 0.0]), _unit([0.0, 1.0])
    cfg0 = LossConfig(w_ce=1.0, w_bce=1.0, w_edg=0.0)
    total, parts = combined_loss(logits, mask, g, tr, tf, torch.tensor(1), cfg0)
    manual = parts["ce"] + parts["bce"]
    assert torch.equal(total, manual)


def test_combined_edge_zero_weight_no_gradient_through_edge_path():
    torch.manual_seed(3)
    logits = torch.randn(5, 5, requires_grad=True)
    mask = torch.zeros(5, 5)
    mask[1:4, 1:4] = 1.0
    g, tr, tf = _unit([1.0, 1.0]), _unit([1.0, 0.0]), _unit([0.0, 1.0])

    total, parts = combined_loss(logits, mask, g, tr, tf, torch.tensor(1),
                                 LossConfig(w_ce=1.0, w_bce=1.0, w_edg=0.0))
    (grad_a,) = torch.autograd.grad(total, logits, retain_graph=True)
    # dropping the zero-weighted edge term from the same graph changes nothing
    (grad_b,) = torch.autograd.grad(1.0 * parts["ce"] + 1.0 * parts["bce"], logits)
    assert torch.equal(grad_a, grad_b)


def test_combined_perfect_prediction_limit():
    mask = torch.zeros(4, 4)
    mask[0:2] = 1.0
    logits = torch.where(mask > 0, torch.tensor(60.0), torch.tensor(-60.0))
    t_real, t_fake = _unit([1.0, 0.0]), _unit([0.0, 1.0])
    total, parts = combined_loss(logits, mask, t_fake.clone(), t_real, t_fake,
                                 torch.tensor(1), LossConfig(temperature=0.07))
    assert total.item() < 1e-6
    assert parts["bce"].item() < 1e-12
    assert parts["edg"].item() < 1e-12


def test_combined_nonfinite_logits_raise():
    logits = torch.zeros(3, 3)
    logits[1, 1] = float("inf")
    with pytest.raises(NumericError):
        combined_loss(logits, torch.zeros(3, 3), _unit([1.0, 0.0]), _unit([1.0, 0.0]),
                      _unit([0.0, 1.0]), torch.tensor(0), LossConfig())


def test_combined_bce_finite_for_large_logits():
    logits = torch.full((3, 3), 80.0)
    total, parts = combined_loss(logits, torch.zeros(3, 3), _unit([1.0, 0.0]), _unit([1.0, 0.0]),
                                 _unit([0.0, 1.0]), torch.tensor(0), LossConfig())
    assert torch.isfinite(total)
    assert abs(parts["bce"].item() - 80.0) < 1e-4  # log(1+e^-80) + 80 ~ 80


def test_combined_terms_nonnegative_random():
    torch.manual_seed(4)
    for _ in range(20):
        logits = torch.randn(6, 6) * 5
        mask = (torch.rand(6, 6) > 0.5).float()
        g = torch.randn(4)
        g = g / g.norm()
        tr = torch.randn(4)
        tr = tr / tr.norm()
        tf = torch.randn(4)
        tf = tf / tf.norm()
        label = torch.tensor(int(torch.rand(()) > 0.5))
        total, parts = combined_loss(logits, mask, g, tr, tf, label, LossConfig())
        assert parts["ce"].item() >= 0
        assert parts["bce"].item() >= 0
        assert parts["edg"].item() >= 0
        assert total.item() >= 0


def test_weight_linearity():
    torch.manual_seed(5)
    logits = torch.randn(5, 5)
    mask = (torch.rand(5, 5) > 0.5).float()
    g, tr, tf = _unit([1.0, 2.0]), _unit([1.0, 0.0]), _unit([0.0, 1.0])
    lam = 2.5
    base = LossConfig(w_ce=1.0, w_bce=0.7, w_edg=0.3)
    scaled = LossConfig(w_ce=lam * 1.0, w_bce=lam * 0.7, w_edg=lam * 0.3)
    t1, _ = combined_loss(logits, mask, g, tr, tf, torch.tensor(1), base)
    t2, _ = combined_loss(logits, mask, g, tr, tf, torch.tensor(1), scaled)
    assert abs(t2.item() - lam * t1.item()) < 1e-6


def test_edge_loss_dominates_bce():
    torch.manual_seed(6)
    for _ in range(10):
        logits = torch.randn(7, 7) * 2
        mask = torch.zeros(7, 7)
        mask[2:5, 3:6] = 1.0
        _, parts = combined_loss(logits, mask, _unit([1.0, 0.0]), _unit([1.0, 0.0]),
                                 _unit([0.0, 1.0]), torch.tensor(1),
                                 LossConfig(edge_gain=4.0, edge_radius=1))
        assert parts["edg"].item() >= parts["bce"].item()
    # empty band -> equality
    _, parts = combined_loss(torch.randn(5, 5), torch.zeros(5, 5), _unit([1.0, 0.0]),
                             _unit([1.0, 0.0]), _unit([0.0, 1.0]), torch.tensor(0), LossConfig())
    assert abs(parts["edg"].item() - parts["bce"].item()) < 1e-7


def test_combined_batched_matches_mean_reduction():
    torch.manual_seed(7)
    logits = torch.randn(3, 4, 4)
    masks = (torch.rand(3, 4, 4) > 0.5).float()
    g = torch.randn(3, 8)
    g = g / g.norm(dim=-1, keepdim=True)
    tr = torch.randn(8)
    tr = tr / tr.norm()
    tf = torch.randn(8)
    tf = tf / tf.norm()
    labels = torch.tensor([0, 1, 1])
    total, parts = combined_loss(logits, masks, g, tr, tf, labels, LossConfig())
    assert torch.isfinite(total)
    # batched bce equals mean of per-sample bce maps
    per = [
        torch.nn.functional.binary_cross_entropy_with_logits(logits[i], masks[i]).item()
        for i in range(3)
    ]
    assert abs(parts["bce"].item() - np.mean(per)) < 1e-6


def test_combined_loss_gradient_check():
    torch.manual_seed(8)
    logits = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    mask = (torch.rand(4, 4) > 0.5).double()
    g0 = torch.randn(6, dtype=torch.float64)
    g = (g0 / g0.norm()).clone().requires_grad_(True)
    tr0 = torch.randn(6, dtype=torch.float64)
    tr = (tr0 / tr0.norm()).clone().requires_grad_(True)
    tf0 = torch.randn(6, dtype=torch.float64)
    tf = (tf0 / tf0.norm()).clone().requires_grad_(True)
    cfg = LossConfig(w_ce=1.0, w_bce=0.8, w_edg=0.5)

    def loss():
        total, _ = combined_loss(logits, mask, g, tr, tf, torch.tensor(1), cfg)
        return total

    worst = finite_difference_check(loss, [logits, g, tr, tf])
    assert worst < 1e-4
