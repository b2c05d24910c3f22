"""Shared test utilities: independent oracles and identity-weight helpers.

The oracles here are deliberately written without reusing the library's own
code paths (explicit loops / closed forms), so they can catch implementation
bugs rather than mirror them.
"""

from __future__ import annotations

import numpy as np
import torch


def set_identity(attn) -> None:
    """Make a CrossAttention block's four projections exact identity maps."""
    d = attn.dim
    with torch.no_grad():
        for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
            lin.weight.copy_(torch.eye(d, dtype=lin.weight.dtype))
            lin.bias.zero_()


def softmax_oracle(scores: np.ndarray) -> np.ndarray:
    """Plain exp/sum softmax over the last axis."""
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def bilinear_resize_oracle(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping.

    ``grid`` is (H, W) or (H, W, C); matches align_corners=False semantics.
    """
    in_h, in_w = grid.shape[:2]
    out = np.zeros((out_h, out_w) + grid.shape[2:], dtype=np.float64)
    for oy in range(out_h):
        sy = (oy + 0.5) * in_h / out_h - 0.5
        y0 = int(np.floor(sy))
        wy = sy - y0
        y0c, y1c = min(max(y0, 0), in_h - 1), min(max(y0 + 1, 0), in_h - 1)
        for ox in range(out_w):
            sx = (ox + 0.5) * in_w / out_w - 0.5
            x0 = int(np.floor(sx))
            wx = sx - x0
            x0c, x1c = min(max(x0, 0), in_w - 1), min(max(x0 + 1, 0), in_w - 1)
            out[oy, ox] = (
                grid[y0c, x0c] * (1 - wy) * (1 - wx)
                + grid[y0c, x1c] * (1 - wy) * wx
                + grid[y1c, x0c] * wy * (1 - wx)
                + grid[y1c, x1c] * wy * wx
            )
    return out


def morphology_band_oracle(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation minus erosion with a (2r+1)^2 window and replicate borders,
    evaluated pixel by pixel."""
    h, w = mask.shape
    band = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            lo_y, hi_y = y - radius, y + radius
            lo_x, hi_x = x - radius, x + radius
            vals = [
                mask[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
                for yy in range(lo_y, hi_y + 1)
                for xx in range(lo_x, hi_x + 1)
            ]
            band[y, x] = max(vals) - min(vals)
    return band


def brute_force_pixel_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    """TP/FP/FN counted with explicit Python loops."""
    tp = fp = fn = 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            p = bool(pred[y, x])
            g = bool(gt[y, x])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif g and not p:
                fn += 1
    return tp, fp, fn


def finite_difference_check(
    build_loss,
    params: list[torch.Tensor],
    step: float = 1e-5,
    max_coords: int = 24,
    seed: int = 0,
) -> float:
    """Worst per-coordinate relative error between autograd and central FD.

    ``build_loss`` must recompute the scalar loss from current parameter
    values on every call; parameters must be double precision.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            i = int(i)
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = build_loss().item()
            flat[i] = orig - step
            f_minus = build_loss().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * step)
            an = gflat[i].item()
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
