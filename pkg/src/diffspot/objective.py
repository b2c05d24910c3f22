"""Three-term training objective: detection CE + localization BCE + edge-weighted BCE.

The detection term is a softmax cross-entropy over temperature-scaled cosine
similarities between the global image vector and the two class embeddings.
Both localization terms supervise the fake-logit map only: plain mean
per-pixel BCE, and a mean BCE reweighted on a morphological boundary band of
the ground-truth mask.  All BCE is computed in log-space from logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NumericError


@dataclass
class LossConfig:
    w_ce: float = 1.0
    w_bce: float = 1.0
    w_edg: float = 1.0
    edge_radius: int = 3
    edge_gain: float = 4.0
    temperature: float = 0.07

    def __post_init__(self) -> None:
        if min(self.w_ce, self.w_bce, self.w_edg) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.edge_radius < 1:
            raise ValueError(f"edge_radius must be >= 1, got {self.edge_radius}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def detection_logits(
    g: torch.Tensor, t_real: torch.Tensor, t_fake: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Cosine similarities of g against (t_real, t_fake), scaled by 1/tau.

    Inputs are expected unit-normalized; returns (..., 2) with index 0 = real.
    """
    cos_real = (g * t_real).sum(dim=-1)
    cos_fake = (g * t_fake).sum(dim=-1)
    return torch.stack([cos_real, cos_fake], dim=-1) / temperature


def detection_loss(
    g: torch.Tensor,
    t_real: torch.Tensor,
    t_fake: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Negative log-probability of the true label under the cosine softmax.

    ``labels``: integer tensor (real=0, fake=1); scalar labels are fine for
    single samples.  Reduction is the mean over samples.
    """
    logits = detection_logits(g, t_real, t_fake, temperature)
    labels = torch.as_tensor(labels, device=logits.device, dtype=torch.long)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        labels = labels.reshape(1)
    return F.cross_entropy(logits, labels)


def edge_weight_map(mask: torch.Tensor, radius: int = 3, gain: float = 4.0) -> torch.Tensor:
    """Per-pixel weights >= 1, boosted on the mask's morphological boundary band.

    Band = dilation minus erosion of the binary mask with a (2r+1)^2
    structuring element under replicate borders; weights = 1 + (gain-1)*band.
    An all-zero or all-one mask has an empty band and uniform weights.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    squeeze = mask.dim() == 2
    m = mask.float()
    if squeeze:
        m = m.unsqueeze(0)
    m4 = m.unsqueeze(1)
    pad = (radius,) * 4
    padded = F.pad(m4, pad, mode="replicate")
    k = 2 * radius + 1
    dilated = F.max_pool2d(padded, k, stride=1)
    eroded = -F.max_pool2d(-padded, k, stride=1)
    band = (dilated - eroded).squeeze(1)
    weights = 1.0 + (gain - 1.0) * band
    return weights.squeeze(0) if squeeze else weights


def combined_loss(
    mask_logits: torch.Tensor,
    mask: torch.Tensor,
    g: torch.Tensor,
    t_real: torch.Tensor,
    t_fake: torch.Tensor,
    labels: torch.Tensor,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the three terms plus the unweighted per-term breakdown.

    ``mask_logits``/``mask`` are (H, W) or (B, H, W); labels follow the
    real=0/fake=1 convention.  Non-finite logits raise :class:`NumericError`.
    """
    if mask_logits.shape != mask.shape:
        raise ValueError(f"logits shape {tuple(mask_logits.shape)} != mask {tuple(mask.shape)}")
    if not torch.isfinite(mask_logits).all():
        raise NumericError("non-finite values in mask logits")

    ce = detection_loss(g, t_real, t_fake, labels, cfg.temperature)
    target = mask.to(mask_logits.dtype)
    bce_map = F.binary_cross_entropy_with_logits(mask_logits, target, reduction="none")
    bce = bce_map.mean()
    weights = edge_weight_map(mask, cfg.edge_radius, cfg.edge_gain).to(mask_logits.dtype)
    edg = (weights * bce_map).mean()

    total = cfg.w_ce * ce + cfg.w_bce * bce + cfg.w_edg * edg
    return total, {"ce": ce, "bce": bce, "edg": edg}
