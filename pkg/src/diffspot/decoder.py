"""Multi-scale convolutional decoder over the final spatial tokens.

The token grid is rendered at several scales (default 0.5x, 2x, 4x); each
scale gets a 3x3 convolution and is bilinearly resized back to the target
resolution; the per-scale maps are concatenated along channels into the dense
feature map consumed by the localization head.  All resizes use the
half-pixel (align_corners=False) convention.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def scale_name(scale: float) -> str:
    """Module-name-safe rendering of a scale factor (0.5 -> ``scale_0_5``)."""
    s = f"{scale:g}".replace(".", "_")
    return f"scale_{s}"


class PyramidDecoder(nn.Module):
    def __init__(self, in_dim: int, scales: tuple[float, ...] = (0.5, 2.0, 4.0), channels: int = 64):
        super().__init__()
        if not scales:
            raise ValueError("scale set must be nonempty")
        if any(s <= 0 for s in scales):
            raise ValueError(f"scales must be positive: {scales}")
        self.scales = tuple(float(s) for s in scales)
        self.channels = channels
        # one conv per scale, registered flat so checkpoint keys read
        # ``decoder.scale_<s>.weight``
        for s in self.scales:
            conv = nn.Conv2d(in_dim, channels, kernel_size=3, padding=1)
            nn.init.xavier_uniform_(conv.weight)
            nn.init.zeros_(conv.bias)
            self.add_module(scale_name(s), conv)

    @property
    def out_channels(self) -> int:
        return self.channels * len(self.scales)

    def conv_for(self, scale: float) -> nn.Conv2d:
        return getattr(self, scale_name(scale))

    def forward(
        self, tokens: torch.Tensor, grid: tuple[int, int], target_hw: tuple[int, int]
    ) -> torch.Tensor:
        """tokens (..., gh*gw, D) -> feature map (B, channels * n_scales, H, W)."""
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        B, N, D = tokens.shape
        gh, gw = grid
        if N != gh * gw:
            raise ValueError(f"token count {N} != grid {gh}x{gw}")
        base = tokens.transpose(1, 2).reshape(B, D, gh, gw)
        outs = []
        for s in self.scales:
            sh, sw = int(round(gh * s)), int(round(gw * s))
            if sh < 1 or sw < 1:
                raise ValueError(f"scale {s} collapses grid {gh}x{gw} below 1x1")
            x = base
            if (sh, sw) != (gh, gw):
                x = F.interpolate(x, size=(sh, sw), mode="bilinear", align_corners=False)
            x = self.conv_for(s)(x)
            if (sh, sw) != tuple(target_hw):
                x = F.interpolate(x, size=tuple(target_hw), mode="bilinear", align_corners=False)
            outs.append(x)
        out = torch.cat(outs, dim=1)
        return out.squeeze(0) if squeeze else out


def decode(
    tokens: torch.Tensor, grid: tuple[int, int], target_hw: tuple[int, int], params: PyramidDecoder
) -> torch.Tensor:
    """Functional alias for :meth:`PyramidDecoder.forward`."""
    return params(tokens, grid, target_hw)
