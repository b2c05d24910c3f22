"""Pretrained-component contracts: semantic vision, text, and spatial encoders.

All three are standard pre-norm transformers with learnable positional
embeddings.  The semantic vision encoder prepends a [CLS] token and exposes
per-layer features; the spatial encoder has no [CLS] token and supports
layer-stepped execution so callers can inject fusion updates between layers;
the text encoder maps continuous prompt vectors to a unit-normalized class
embedding.  Frozen encoders never receive gradients.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_arrays, save_arrays
from .errors import CheckpointError

KINDS = ("semantic_vision", "text", "spatial")


@dataclass(frozen=True)
class EncoderSpec:
    """Shape-level description of one encoder.

    ``patch_size``/``input_size`` apply to the vision kinds; for text
    encoders ``input_size`` is the prompt length and ``patch_size`` is None.
    """

    kind: str
    depth: int
    width: int
    patch_size: int | None = None
    input_size: int | None = None
    frozen: bool = False
    heads: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1 or self.width % self.heads != 0:
            raise ValueError(f"width {self.width} must be positive and divisible by heads {self.heads}")
        if self.kind != "text":
            if not self.patch_size or not self.input_size:
                raise ValueError(f"{self.kind} encoder needs patch_size and input_size")
            if self.input_size % self.patch_size != 0:
                raise ValueError(
                    f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
                )

    @property
    def grid(self) -> tuple[int, int]:
        g = self.input_size // self.patch_size
        return (g, g)

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class LayerFeatures:
    """Per-layer encoder output: optional [CLS] vector plus the patch grid.

    ``patches`` is (..., N, D) with N == grid[0] * grid[1], rows in row-major
    grid order.  ``cls`` is present iff the producing encoder defines a [CLS]
    token.
    """

    patches: torch.Tensor
    grid: tuple[int, int]
    layer_index: int
    cls: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.patches.shape[-2] != self.grid[0] * self.grid[1]:
            raise ValueError(
                f"patch count {self.patches.shape[-2]} != grid {self.grid[0]}x{self.grid[1]}"
            )


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class VisionEncoder(nn.Module):
    """Patchify + transformer stack; optionally with a prepended [CLS] token.

    ``step`` runs exactly one layer so callers may modify the token stream
    between layers; ``forward`` is literally the composition of all steps.
    """

    def __init__(self, spec: EncoderSpec, use_cls: bool):
        super().__init__()
        if spec.kind == "text":
            raise ValueError("VisionEncoder requires a vision spec")
        self.spec = spec
        self.use_cls = use_cls
        self.patch_embed = nn.Conv2d(3, spec.width, spec.patch_size, stride=spec.patch_size)
        n_tokens = spec.num_patches + (1 if use_cls else 0)
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, spec.width))
        if use_cls:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.width, spec.heads, spec.mlp_ratio) for _ in range(spec.depth)
        )
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if use_cls:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        if spec.frozen:
            self.requires_grad_(False)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """images (B, 3, H, W) -> tokens (B, N(+1), D) with positions added."""
        if images.shape[-2:] != (self.spec.input_size, self.spec.input_size):
            raise ValueError(
                f"expected {self.spec.input_size}x{self.spec.input_size} input, "
                f"got {tuple(images.shape[-2:])}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        if self.use_cls:
            cls = self.cls_token.expand(x.shape[0], -1, -1)
            x = torch.cat([cls, x], dim=1)
        return x + self.pos_embed

    def step(self, tokens: torch.Tensor, layer_index: int) -> torch.Tensor:
        """Run a single transformer layer (0-based index)."""
        if not 0 <= layer_index < self.spec.depth:
            raise IndexError(f"layer_index {layer_index} out of range [0, {self.spec.depth})")
        return self.blocks[layer_index](tokens)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.embed(images)
        for i in range(self.spec.depth):
            x = self.step(x, i)
        return x

    def layer_features(self, images: torch.Tensor) -> list[LayerFeatures]:
        """Per-layer hidden states as LayerFeatures (one entry per layer)."""
        x = self.embed(images)
        out = []
        for i in range(self.spec.depth):
            x = self.step(x, i)
            if self.use_cls:
                out.append(LayerFeatures(patches=x[:, 1:], grid=self.spec.grid, layer_index=i, cls=x[:, 0]))
            else:
                out.append(LayerFeatures(patches=x, grid=self.spec.grid, layer_index=i))
        return out


class TextEncoder(nn.Module):
    """Transformer over continuous prompt vectors -> unit-normalized class embedding.

    The prompt length is fixed by the positional table; the final token states
    are layer-normalized, mean-pooled, and projected to ``out_dim``.
    """

    def __init__(self, spec: EncoderSpec, prompt_length: int, out_dim: int):
        super().__init__()
        if spec.kind != "text":
            raise ValueError("TextEncoder requires a text spec")
        self.spec = spec
        self.prompt_length = prompt_length
        self.out_dim = out_dim
        self.pos_embed = nn.Parameter(torch.zeros(1, prompt_length, spec.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.width, spec.heads, spec.mlp_ratio) for _ in range(spec.depth)
        )
        self.norm = nn.LayerNorm(spec.width)
        self.proj = nn.Linear(spec.width, out_dim, bias=False)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if spec.frozen:
            self.requires_grad_(False)

    def encode(self, prompts: torch.Tensor) -> torch.Tensor:
        """prompts (..., M, D_text) -> (..., out_dim), unit Euclidean norm."""
        if prompts.shape[-2] != self.prompt_length:
            raise ValueError(
                f"prompt length {prompts.shape[-2]} != configured {self.prompt_length}"
            )
        squeeze = prompts.dim() == 2
        x = prompts.unsqueeze(0) if squeeze else prompts
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x).mean(dim=-2)
        x = self.proj(x)
        x = x / x.norm(dim=-1, keepdim=True)
        return x.squeeze(0) if squeeze else x

    def forward(self, prompts: torch.Tensor) -> torch.Tensor:
        return self.encode(prompts)


# ---------------------------------------------------------------------------
# checkpoint adapter and digests
# ---------------------------------------------------------------------------


def save_encoder(encoder: nn.Module, path) -> None:
    """Write an encoder's parameters to a named-array archive."""
    arrays = {k: v.detach().cpu().numpy() for k, v in encoder.state_dict().items()}
    save_arrays(path, arrays, meta={"kind": "encoder"})


def load_pretrained(archive_path, spec: EncoderSpec, use_cls: bool | None = None) -> dict[str, torch.Tensor]:
    """Load encoder weights from a named-array archive, shape-checked against ``spec``.

    Missing keys and shape conflicts raise :class:`CheckpointError` naming the
    offending key; unexpected extra keys produce a warning and are ignored.
    """
    if use_cls is None:
        use_cls = spec.kind == "semantic_vision"
    if spec.kind == "text":
        raise ValueError("text encoders are loaded via their owning model checkpoint")
    reference = VisionEncoder(spec, use_cls=use_cls)
    expected = {k: tuple(v.shape) for k, v in reference.state_dict().items()}
    arrays, _ = load_arrays(archive_path)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"{archive_path}: missing key {missing[0]!r} (and {len(missing) - 1} more)")
    extra = sorted(set(arrays) - set(expected))
    if extra:
        warnings.warn(f"{archive_path}: ignoring unexpected keys {extra}", stacklevel=2)
    out = {}
    for key, shape in expected.items():
        if tuple(arrays[key].shape) != shape:
            raise CheckpointError(
                f"{archive_path}: shape conflict for {key!r}: archive {tuple(arrays[key].shape)} vs spec {shape}"
            )
        out[key] = torch.from_numpy(np.ascontiguousarray(arrays[key]))
    return out


def parameter_digest(module: nn.Module) -> str:
    """sha256 over all parameter bytes in state-dict key order."""
    h = hashlib.sha256()
    for key in sorted(dict(module.state_dict())):
        t = module.state_dict()[key]
        h.update(key.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
