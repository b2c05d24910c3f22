"""Model assembly, training loop, inference, and checkpointing.

The full model couples a frozen semantic vision encoder and frozen text
encoder with a tunable spatial encoder through the synergy blocks, decodes
the final spatial tokens into a dense feature map, and produces an
image-level fake probability plus per-pixel fake logits.

Parameter groups: the frozen group is the semantic vision + text encoders;
everything else (prompts, VSA, VCA, TVCA, decoder, spatial encoder) is
tunable and owned by a single Adam optimizer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as D
from .checkpoint import load_arrays, save_arrays
from .config import validate_config
from .decoder import PyramidDecoder
from .encoders import EncoderSpec, TextEncoder, VisionEncoder
from .errors import CheckpointError, NumericError, ValidationError
from .objective import LossConfig, combined_loss, detection_logits
from .spm import FusionPlan, PromptBank, TvcaHead, VcaBlock, VsaBlock, run_fusion_plan

STATE_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1.0e-4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    checkpoint_every: int = 1
    device: str = "cpu"

    @staticmethod
    def from_config(cfg: dict) -> "TrainConfig":
        return TrainConfig(**cfg["training"])


class SpmBlocks(nn.Module):
    """Container for the tunable synergy blocks (checkpoint namespace ``spm.*``)."""

    def __init__(
        self,
        prompt_length: int,
        text_width: int,
        semantic_width: int,
        spatial_width: int,
        feature_dim: int,
        n_vca: int,
        heads: int,
    ):
        super().__init__()
        self.prompt = PromptBank(prompt_length, text_width)
        self.vsa = VsaBlock(semantic_width, heads)
        self.vca = nn.ModuleList(
            VcaBlock(semantic_width, spatial_width, heads) for _ in range(n_vca)
        )
        self.tvca = TvcaHead(feature_dim, semantic_width, heads)


@dataclass
class ModelOutputs:
    g: torch.Tensor
    t_real: torch.Tensor
    t_fake: torch.Tensor
    spatial_tokens: torch.Tensor
    features: torch.Tensor
    m_real: torch.Tensor
    m_fake: torch.Tensor
    det_logits: torch.Tensor


class SpmModel(nn.Module):
    def __init__(
        self,
        semantic_spec: EncoderSpec,
        text_spec: EncoderSpec,
        spatial_spec: EncoderSpec,
        prompt_length: int = 10,
        fusion_plan: FusionPlan | None = None,
        vsa_layers: tuple[int, ...] | None = None,
        attention_heads: int = 8,
        decoder_scales: tuple[float, ...] = (0.5, 2.0, 4.0),
        decoder_channels: int = 64,
        temperature: float = 0.07,
    ):
        super().__init__()
        if fusion_plan is None:
            fusion_plan = FusionPlan.default_for(semantic_spec.depth, spatial_spec.depth)
        fusion_plan.validate(semantic_spec.depth, spatial_spec.depth)
        self.semantic = VisionEncoder(semantic_spec, use_cls=True)
        self.text = TextEncoder(text_spec, prompt_length, out_dim=semantic_spec.width)
        self.spatial = VisionEncoder(spatial_spec, use_cls=False)
        self.decoder = PyramidDecoder(spatial_spec.width, decoder_scales, decoder_channels)
        self.spm = SpmBlocks(
            prompt_length=prompt_length,
            text_width=text_spec.width,
            semantic_width=semantic_spec.width,
            spatial_width=spatial_spec.width,
            feature_dim=self.decoder.out_channels,
            n_vca=len(fusion_plan.pairs),
            heads=attention_heads,
        )
        self.fusion_plan = fusion_plan
        self.vsa_layers = vsa_layers
        self.temperature = temperature

    @property
    def spatial_input_size(self) -> int:
        return self.spatial.spec.input_size

    @property
    def semantic_input_size(self) -> int:
        return self.semantic.spec.input_size

    def frozen_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(("semantic.", "text."))]

    def tunable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [
            (n, p) for n, p in self.named_parameters() if not n.startswith(("semantic.", "text."))
        ]

    def forward(self, spatial_images: torch.Tensor, semantic_images: torch.Tensor) -> ModelOutputs:
        g, tokens, t_real, t_fake = run_fusion_plan(
            spatial_images,
            semantic_images,
            semantic=self.semantic,
            spatial=self.spatial,
            text=self.text,
            prompts=self.spm.prompt,
            vsa=self.spm.vsa,
            vca_blocks=self.spm.vca,
            plan=self.fusion_plan,
            vsa_layers=self.vsa_layers,
        )
        g = g / g.norm(dim=-1, keepdim=True)
        size = self.spatial_input_size
        features = self.decoder(tokens, self.spatial.spec.grid, (size, size))
        m_real, m_fake = self.spm.tvca(features, t_real, t_fake)
        det = detection_logits(g, t_real, t_fake, self.temperature)
        return ModelOutputs(g, t_real, t_fake, tokens, features, m_real, m_fake, det)


def build_model(cfg: dict) -> SpmModel:
    m = cfg["model"]
    semantic = EncoderSpec(kind="semantic_vision", frozen=True, **m["semantic"])
    text = EncoderSpec(kind="text", frozen=True, **m["text"])
    spatial = EncoderSpec(kind="spatial", frozen=False, **m["spatial"])
    vsa_layers = None if m["vsa_layers"] == "all" else tuple(int(v) for v in m["vsa_layers"])
    return SpmModel(
        semantic_spec=semantic,
        text_spec=text,
        spatial_spec=spatial,
        prompt_length=m["prompt_length"],
        fusion_plan=FusionPlan(tuple((int(a), int(b)) for a, b in m["fusion_plan"])),
        vsa_layers=vsa_layers,
        attention_heads=m["attention_heads"],
        decoder_scales=tuple(m["decoder"]["scales"]),
        decoder_channels=m["decoder"]["channels"],
        temperature=cfg["losses"]["temperature"],
    )


@dataclass
class ModelState:
    model: SpmModel
    optimizer: torch.optim.Adam
    config: dict
    step: int = 0
    epoch: int = 0


def init_state(cfg: dict) -> ModelState:
    """Seeded construction of the model and its optimizer over tunables only."""
    validate_config(cfg)
    torch.manual_seed(int(cfg["seed"]))
    model = build_model(cfg)
    tc = TrainConfig.from_config(cfg)
    optimizer = torch.optim.Adam(
        [p for _, p in model.tunable_parameters()],
        lr=tc.learning_rate,
        betas=(tc.beta1, tc.beta2),
        eps=tc.eps,
    )
    return ModelState(model=model, optimizer=optimizer, config=cfg)


def frozen_digest(model: SpmModel) -> str:
    """sha256 over the frozen-group (semantic + text encoder) parameter bytes."""
    h = hashlib.sha256()
    sd = model.state_dict()
    for key in sorted(sd):
        if key.startswith(("semantic.", "text.")):
            h.update(key.encode("utf-8"))
            h.update(sd[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    ce: float
    bce: float
    edg: float
    steps: int

    def as_dict(self) -> dict:
        return self.__dict__.copy()


def _to_tensor_batch(samples: list[D.ImageSample], views: list[np.ndarray]):
    spatial = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float()
    semantic = torch.from_numpy(np.stack(views)).permute(0, 3, 1, 2).float()
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).float()
    labels = torch.tensor([D.LABEL_INDEX[s.label] for s in samples], dtype=torch.long)
    return spatial, semantic, masks, labels


def training_step(state: ModelState, batch) -> dict[str, float]:
    """One optimization step over a collated batch; returns per-term losses."""
    spatial, semantic, masks, labels = batch
    cfg = state.config
    loss_cfg = LossConfig(**cfg["losses"])
    try:
        out = state.model(spatial, semantic)
        total, parts = combined_loss(
            out.m_fake, masks, out.g, out.t_real, out.t_fake, labels, loss_cfg
        )
    except NumericError as exc:
        raise NumericError(f"aborted at step {state.step}: {exc}") from exc
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss, aborted at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return {
        "loss": float(total.detach()),
        "ce": float(parts["ce"].detach()),
        "bce": float(parts["bce"].detach()),
        "edg": float(parts["edg"].detach()),
    }


def train(
    manifest: D.Manifest,
    cfg: dict,
    out_dir: str | Path | None = None,
    state: ModelState | None = None,
) -> tuple[ModelState, list[EpochLog]]:
    """Run the configured number of epochs over the manifest's train split.

    Each step: augment batch -> fused forward -> decode -> localization head
    -> combined loss -> update tunables.  Writes a checkpoint every
    ``checkpoint_every`` epochs (plus ``final.ckpt``) when ``out_dir`` is set.
    Non-finite losses abort with the failing step index.
    """
    validate_config(cfg)
    tc = TrainConfig.from_config(cfg)
    seed = int(cfg["seed"])
    entries = manifest.filter(split="train").entries
    labels_present = {e.label for e in entries}
    if labels_present != set(D.LABELS):
        raise ValidationError(
            f"training needs at least one sample of each label, got {sorted(labels_present)}"
        )

    if state is None:
        state = init_state(cfg)
    state.model.train()
    aug_cfg = D.AugmentationConfig(
        **{**cfg["data"]["augment"], "scale_range": tuple(cfg["data"]["augment"]["scale_range"]),
           "blur_kernels": tuple(cfg["data"]["augment"]["blur_kernels"]),
           "jpeg_quality": tuple(cfg["data"]["augment"]["jpeg_quality"])}
    )

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    cache: dict[str, D.ImageSample] = {}
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F0E]))
    history: list[EpochLog] = []
    for epoch in range(1, tc.epochs + 1):
        order = shuffle_rng.permutation(len(entries))
        sums = {"loss": 0.0, "ce": 0.0, "bce": 0.0, "edg": 0.0}
        steps = 0
        for start in range(0, len(entries), tc.batch_size):
            chunk = [entries[i] for i in order[start : start + tc.batch_size]]
            samples, views = [], []
            for e in chunk:
                if e.id not in cache:
                    cache[e.id] = D.load_sample(manifest, e)
                rng = D.rng_for(seed, "augment", epoch, e.id)
                aug, view = D.augment(cache[e.id], aug_cfg, rng)
                samples.append(aug)
                views.append(view)
            parts = training_step(state, _to_tensor_batch(samples, views))
            for k in sums:
                sums[k] += parts[k]
            steps += 1
        state.epoch = epoch
        history.append(
            EpochLog(
                epoch=epoch,
                loss=sums["loss"] / steps,
                ce=sums["ce"] / steps,
                bce=sums["bce"] / steps,
                edg=sums["edg"] / steps,
                steps=steps,
            )
        )
        if ckpt_dir is not None and (epoch % tc.checkpoint_every == 0 or epoch == tc.epochs):
            save_state(state, ckpt_dir / f"epoch_{epoch:04d}.ckpt")
    if ckpt_dir is not None:
        save_state(state, ckpt_dir / "final.ckpt")
    return state, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class PredictionResult:
    p_fake: float
    mask_logits: np.ndarray  # H x W float32, original image resolution
    mask_binary: np.ndarray  # H x W bool at the configured threshold
    threshold: float = 0.5

    @property
    def mask_prob(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.mask_logits.astype(np.float64)))


def predict_batch(
    state: ModelState, images: list[np.ndarray], threshold: float = 0.5
) -> list[PredictionResult]:
    """Run inference on equally sized [0,1] RGB arrays."""
    model = state.model
    model.eval()
    size_s = model.spatial_input_size
    size_c = model.semantic_input_size
    orig_hw = [img.shape[:2] for img in images]
    spatial = np.stack([D.resize_image(img, (size_s, size_s)) for img in images])
    semantic = np.stack([D.resize_image(img, (size_c, size_c)) for img in images])
    with torch.no_grad():
        sp = torch.from_numpy(spatial).permute(0, 3, 1, 2).float()
        se = torch.from_numpy(semantic).permute(0, 3, 1, 2).float()
        out = model(sp, se)
        p_fake = out.det_logits.softmax(dim=-1)[:, D.LABEL_INDEX[D.LABEL_FAKE]]
        logits = out.m_fake
    results = []
    for i, (h, w) in enumerate(orig_hw):
        m = logits[i : i + 1].unsqueeze(1)
        if (h, w) != (size_s, size_s):
            m = F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
        mask_logits = m[0, 0].numpy().astype(np.float32)
        prob = 1.0 / (1.0 + np.exp(-mask_logits.astype(np.float64)))
        results.append(
            PredictionResult(
                p_fake=float(p_fake[i]),
                mask_logits=mask_logits,
                mask_binary=prob > threshold,
                threshold=threshold,
            )
        )
    return results


def predict(state: ModelState, image: np.ndarray, threshold: float = 0.5) -> PredictionResult:
    """Fake probability plus the per-pixel fake-logit map for one image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("predict expects an HxWx3 array in [0,1]")
    return predict_batch(state, [image], threshold)[0]


# ---------------------------------------------------------------------------
# state serialization
# ---------------------------------------------------------------------------


def save_state(state: ModelState, path: str | Path) -> None:
    """Write the model parameters, optimizer moments, and rng state.

    The archive is accompanied by a ``<path>.json`` metadata record holding
    the config snapshot, step/epoch counters, and format version.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {
        k: v.detach().cpu().numpy() for k, v in state.model.state_dict().items()
    }
    param_names = {id(p): n for n, p in state.model.named_parameters()}
    for p, opt_state in state.optimizer.state.items():
        name = param_names[id(p)]
        for field_name in ("exp_avg", "exp_avg_sq"):
            if field_name in opt_state:
                arrays[f"optim.{name}.{field_name}"] = opt_state[field_name].detach().cpu().numpy()
        if "step" in opt_state:
            arrays[f"optim.{name}.step"] = np.asarray(
                opt_state["step"].detach().cpu() if torch.is_tensor(opt_state["step"]) else opt_state["step"],
                dtype=np.float64,
            )
    arrays["rng.torch_state"] = torch.get_rng_state().numpy()
    save_arrays(path, arrays, meta={"kind": "model-state"})
    meta = {
        "format_version": STATE_FORMAT_VERSION,
        "step": state.step,
        "epoch": state.epoch,
        "config": state.config,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_state(path: str | Path) -> ModelState:
    """Rebuild a :class:`ModelState` whose predictions match the saved one."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise CheckpointError(f"missing metadata record: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != STATE_FORMAT_VERSION:
        raise CheckpointError(
            f"state format version {meta.get('format_version')!r} != {STATE_FORMAT_VERSION}"
        )
    arrays, _ = load_arrays(path)
    state = init_state(meta["config"])
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])

    model_sd = state.model.state_dict()
    missing = sorted(set(model_sd) - set(arrays))
    if missing:
        raise CheckpointError(f"{path}: missing model key {missing[0]!r} (and {len(missing) - 1} more)")
    state.model.load_state_dict(
        {k: torch.from_numpy(np.ascontiguousarray(arrays[k])) for k in model_sd}
    )

    name_to_param = dict(state.model.named_parameters())
    for name, param in name_to_param.items():
        key = f"optim.{name}.exp_avg"
        if key in arrays:
            state.optimizer.state[param] = {
                "step": torch.tensor(float(arrays[f"optim.{name}.step"])),
                "exp_avg": torch.from_numpy(np.ascontiguousarray(arrays[key])),
                "exp_avg_sq": torch.from_numpy(
                    np.ascontiguousarray(arrays[f"optim.{name}.exp_avg_sq"])
                ),
            }
    if "rng.torch_state" in arrays:
        torch.set_rng_state(torch.from_numpy(np.ascontiguousarray(arrays["rng.torch_state"])))
    return state
