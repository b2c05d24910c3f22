"""Synergy blocks coupling the frozen encoders with the tunable spatial stream.

Everything tunable that connects the pretrained components lives here:

* :class:`PromptBank` — learnable real/fake prompt vectors and their encoded
  class embeddings.
* :class:`CrossAttention` — multi-head scaled-dot-product attention with
  separate query/key/value/output projections (softmax over the key axis).
* :class:`VsaBlock` — self-attention over per-layer [CLS] tokens, pooled and
  projected to the global image representation g.
* :class:`VcaBlock` — fuses semantic patch features into the spatial token
  stream (resize -> 1x1 channel projection -> attention -> residual add).
* :class:`TvcaHead` — text-guided mask head: class embeddings query the dense
  feature map; the pre-softmax score maps are refined by a 1x1 convolution
  into (M_real, M_fake) logit maps.
* :func:`run_fusion_plan` — the interleaved forward pass over both encoders.

VCA output projections and the TVCA refinement convolution are
zero-initialized, so a freshly built model is exactly the unfused baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import LayerFeatures, TextEncoder, VisionEncoder


class CrossAttention(nn.Module):
    """Multi-head attention: per head Softmax(Q K^T / sqrt(d)) V, heads
    concatenated and output-projected.  ``zero_out`` zero-initializes the
    output projection so the block starts as a no-op inside residual updates.
    """

    def __init__(self, dim: int, num_heads: int = 8, zero_out: bool = False):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)
        for lin in (self.wq, self.wk, self.wv, self.wo):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        if zero_out:
            nn.init.zeros_(self.wo.weight)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        return x.reshape(B, N, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        """query (..., n_q, dim), key/value (..., n_k, dim) -> (..., n_q, dim)."""
        if key.shape[-2] != value.shape[-2]:
            raise ValueError("key and value must have the same row count")
        if key.shape[-2] < 1:
            raise ValueError("attention needs at least one key")
        squeeze = query.dim() == 2
        if squeeze:
            query, key, value = query.unsqueeze(0), key.unsqueeze(0), value.unsqueeze(0)
        q = self._split(self.wq(query))
        k = self._split(self.wk(key))
        v = self._split(self.wv(value))
        attn = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.dim)
        out = self.wo(out)
        return out.squeeze(0) if squeeze else out


def attention(query: torch.Tensor, key: torch.Tensor, value: torch.Tensor, params: CrossAttention) -> torch.Tensor:
    """Functional alias: apply an attention block to explicit Q/K/V inputs."""
    return params(query, key, value)


class PromptBank(nn.Module):
    """Learnable real/fake prompt vector pairs (M x D_text each).

    ``class_embeddings`` runs the text encoder over both prompt sequences.
    Under ``torch.no_grad`` the result is cached and refreshed automatically
    whenever the prompt parameters change (tracked via tensor versions).
    """

    def __init__(self, prompt_length: int, text_width: int):
        super().__init__()
        self.prompt_length = prompt_length
        self.v_real = nn.Parameter(torch.empty(prompt_length, text_width))
        self.v_fake = nn.Parameter(torch.empty(prompt_length, text_width))
        nn.init.normal_(self.v_real, std=0.02)
        nn.init.normal_(self.v_fake, std=0.02)
        self._cache: tuple[tuple[int, int], torch.Tensor, torch.Tensor] | None = None

    def class_embeddings(self, text_encoder: TextEncoder) -> tuple[torch.Tensor, torch.Tensor]:
        if torch.is_grad_enabled():
            return text_encoder.encode(self.v_real), text_encoder.encode(self.v_fake)
        versions = (self.v_real._version, self.v_fake._version)
        if self._cache is None or self._cache[0] != versions:
            t_real = text_encoder.encode(self.v_real)
            t_fake = text_encoder.encode(self.v_fake)
            self._cache = (versions, t_real, t_fake)
        return self._cache[1], self._cache[2]


class VsaBlock(nn.Module):
    """Self-attention over the sequence of per-layer [CLS] tokens.

    Output: attention over the token sequence, global average pool, learned
    linear projection.  The result is the (unnormalized) global image
    representation; callers normalize before cosine similarity.
    """

    def __init__(self, dim: int, num_heads: int = 8):
        super().__init__()
        self.attn = CrossAttention(dim, num_heads)
        self.proj = nn.Linear(dim, dim)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, cls_tokens: torch.Tensor) -> torch.Tensor:
        """cls_tokens (..., L, D) over L layers -> (..., D)."""
        if cls_tokens.shape[-2] < 1:
            raise ValueError("need at least one [CLS] token")
        x = self.attn(cls_tokens, cls_tokens, cls_tokens)
        return self.proj(x.mean(dim=-2))


def vsa_aggregate(cls_tokens: list[torch.Tensor] | torch.Tensor, params: VsaBlock) -> torch.Tensor:
    """Aggregate per-layer [CLS] tokens into one global vector."""
    if isinstance(cls_tokens, (list, tuple)):
        if len(cls_tokens) == 0:
            raise ValueError("need at least one [CLS] token")
        cls_tokens = torch.stack(list(cls_tokens), dim=-2)
    return params(cls_tokens)


def resize_token_grid(tokens: torch.Tensor, grid: tuple[int, int], new_grid: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a flattened token grid (..., gh*gw, C) to a new grid.

    Uses the half-pixel (align_corners=False) sampling convention.
    """
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    B, N, C = tokens.shape
    gh, gw = grid
    if N != gh * gw:
        raise ValueError(f"token count {N} != grid {gh}x{gw}")
    if (gh, gw) != new_grid:
        maps = tokens.transpose(1, 2).reshape(B, C, gh, gw)
        maps = F.interpolate(maps, size=new_grid, mode="bilinear", align_corners=False)
        tokens = maps.reshape(B, C, new_grid[0] * new_grid[1]).transpose(1, 2)
    out = tokens
    return out.squeeze(0) if squeeze else out


class VcaBlock(nn.Module):
    """Fuse semantic patch features into the spatial token stream.

    Pipeline: bilinear-resize the semantic grid to the spatial grid, project
    channels with a 1x1 convolution, use the projected features as queries
    against the spatial tokens (keys/values), and add the attention output
    back onto the spatial tokens.  The attention output projection is
    zero-initialized, so at initialization this block is the identity.
    """

    def __init__(self, semantic_dim: int, spatial_dim: int, num_heads: int = 8):
        super().__init__()
        self.channel_proj = nn.Conv2d(semantic_dim, spatial_dim, kernel_size=1)
        nn.init.xavier_uniform_(self.channel_proj.weight)
        nn.init.zeros_(self.channel_proj.bias)
        self.attn = CrossAttention(spatial_dim, num_heads, zero_out=True)
        self.calls = 0  # instrumentation: number of forward invocations

    def forward(
        self,
        semantic_patches: torch.Tensor,
        semantic_grid: tuple[int, int],
        spatial_tokens: torch.Tensor,
        spatial_grid: tuple[int, int],
    ) -> torch.Tensor:
        self.calls += 1
        squeeze = spatial_tokens.dim() == 2
        sem = semantic_patches.unsqueeze(0) if semantic_patches.dim() == 2 else semantic_patches
        spat = spatial_tokens.unsqueeze(0) if squeeze else spatial_tokens
        sem = resize_token_grid(sem, semantic_grid, spatial_grid)
        B, N, _ = sem.shape
        maps = sem.transpose(1, 2).reshape(B, -1, spatial_grid[0], spatial_grid[1])
        sem = self.channel_proj(maps).flatten(2).transpose(1, 2)
        fused = spat + self.attn(sem, spat, spat)
        return fused.squeeze(0) if squeeze else fused


def vca_fuse(
    semantic: LayerFeatures, spatial_tokens: torch.Tensor, spatial_grid: tuple[int, int], params: VcaBlock
) -> torch.Tensor:
    """Apply one VCA fusion step given a semantic layer's features."""
    return params(semantic.patches, semantic.grid, spatial_tokens, spatial_grid)


class TvcaHead(nn.Module):
    """Text-guided localization head.

    The dense feature map is linearly projected to the class-embedding
    dimension; the two class embeddings act as queries over all spatial
    positions.  The per-head pre-softmax scores Q K^T / sqrt(d) are averaged
    over heads, reshaped to two response maps, and refined by a 1x1
    convolution (zero-initialized) into the (M_real, M_fake) logit maps.
    """

    def __init__(self, feature_dim: int, embed_dim: int, num_heads: int = 8):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ValueError(f"embed_dim {embed_dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.feature_proj = nn.Linear(feature_dim, embed_dim)
        self.wq = nn.Linear(embed_dim, embed_dim)
        self.wk = nn.Linear(embed_dim, embed_dim)
        for lin in (self.feature_proj, self.wq, self.wk):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.refine = nn.Conv2d(2, 2, kernel_size=1)
        nn.init.zeros_(self.refine.weight)
        nn.init.zeros_(self.refine.bias)

    def score_maps(self, features: torch.Tensor, t_real: torch.Tensor, t_fake: torch.Tensor) -> torch.Tensor:
        """features (B, C, H, W) -> head-averaged score maps (B, 2, H, W)."""
        if features.shape[-1] == 0 or features.shape[-2] == 0:
            raise ValueError("feature map has an empty spatial dim")
        B, C, H, W = features.shape
        keys = self.wk(self.feature_proj(features.flatten(2).transpose(1, 2)))
        queries = self.wq(torch.stack([t_real, t_fake], dim=0)).unsqueeze(0).expand(B, -1, -1)
        q = queries.reshape(B, 2, self.num_heads, self.head_dim).transpose(1, 2)
        k = keys.reshape(B, H * W, self.num_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        return scores.mean(dim=1).reshape(B, 2, H, W)

    def forward(
        self, features: torch.Tensor, t_real: torch.Tensor, t_fake: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (M_real, M_fake) logit maps, each (B, H, W)."""
        refined = self.refine(self.score_maps(features, t_real, t_fake))
        return refined[:, 0], refined[:, 1]


def tvca_localize(
    features: torch.Tensor, t_real: torch.Tensor, t_fake: torch.Tensor, params: TvcaHead
) -> tuple[torch.Tensor, torch.Tensor]:
    """Produce (M_real, M_fake) localization logit maps from a feature map."""
    return params(features, t_real, t_fake)


@dataclass(frozen=True)
class FusionPlan:
    """Ordered (semantic_layer, spatial_layer) pairs at which fusion fires.

    Layer indices are 1-based; a fusion pair applies to the *output* of the
    named layers.  Spatial indices must be strictly increasing.
    """

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        spatial = [p[1] for p in self.pairs]
        if any(b <= a for a, b in zip(spatial, spatial[1:])):
            raise ValueError(f"spatial layer indices must be strictly increasing: {spatial}")
        if any(s < 1 or m < 1 for m, s in self.pairs):
            raise ValueError(f"layer indices are 1-based and must be >= 1: {self.pairs}")

    def validate(self, semantic_depth: int, spatial_depth: int) -> "FusionPlan":
        for sem, spat in self.pairs:
            if sem > semantic_depth:
                raise ValueError(f"semantic layer {sem} exceeds depth {semantic_depth}")
            if spat > spatial_depth:
                raise ValueError(f"spatial layer {spat} exceeds depth {spatial_depth}")
        return self

    @staticmethod
    def default_for(semantic_depth: int, spatial_depth: int, n_pairs: int = 4) -> "FusionPlan":
        """Evenly spaced pairs covering both stacks (e.g. depths 24/12 ->
        semantic {6,12,18,24} with spatial {3,6,9,12})."""
        n = min(n_pairs, spatial_depth, semantic_depth)
        pairs = tuple(
            (round(i * semantic_depth / n), round(i * spatial_depth / n)) for i in range(1, n + 1)
        )
        return FusionPlan(pairs).validate(semantic_depth, spatial_depth)


def run_fusion_plan(
    spatial_images: torch.Tensor,
    semantic_images: torch.Tensor,
    *,
    semantic: VisionEncoder,
    spatial: VisionEncoder,
    text: TextEncoder,
    prompts: PromptBank,
    vsa: VsaBlock,
    vca_blocks: nn.ModuleList,
    plan: FusionPlan,
    vsa_layers: tuple[int, ...] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Interleaved forward pass over both encoders.

    Runs the semantic encoder once (no gradients: it is frozen and its
    outputs enter the graph as constants), steps the spatial encoder layer by
    layer firing one VCA block per plan pair, aggregates [CLS] tokens with
    VSA, and encodes the prompt bank.

    Returns ``(g, spatial_tokens, t_real, t_fake)``.
    """
    plan.validate(semantic.spec.depth, spatial.spec.depth)
    if len(vca_blocks) != len(plan.pairs):
        raise ValueError(f"{len(vca_blocks)} VCA blocks for {len(plan.pairs)} plan pairs")
    with torch.no_grad():
        sem_layers = semantic.layer_features(semantic_images)

    fuse_at = {spat: (sem, blk) for (sem, spat), blk in zip(plan.pairs, vca_blocks)}
    tokens = spatial.embed(spatial_images)
    for i in range(spatial.spec.depth):
        tokens = spatial.step(tokens, i)
        hit = fuse_at.get(i + 1)
        if hit is not None:
            sem_idx, blk = hit
            tokens = vca_fuse(sem_layers[sem_idx - 1], tokens, spatial.spec.grid, blk)

    layers = vsa_layers or tuple(range(1, semantic.spec.depth + 1))
    cls_seq = torch.stack([sem_layers[l - 1].cls for l in layers], dim=-2)
    g = vsa(cls_seq)
    t_real, t_fake = prompts.class_embeddings(text)
    return g, tokens, t_real, t_fake
