"""Query-based set-prediction network: convolutional backbone, transformer
encoder-decoder, class/box/attribute heads, and an FPN-style mask head that
emits a two-channel (cytoplasm, nucleus) mask per query.

The toy backbone is a 4-stage residual stack trained from scratch; a 50-layer
residual backbone is available as a configuration that accepts externally
supplied weights through a loading hook.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import (
    ATTRIBUTE_CARDINALITIES,
    BoundingBox,
    CellClass,
    ExplanationAttributes,
    MaskPair,
    NUM_CLASSES,
    PredictionSet,
    binarize_mask,
    compute_nc_ratio,
    softmax,
)
from .errors import DimensionError, EmptyCytoplasm, InvalidConfig, NoDetection
from .losses import SlotTensors

CHECKPOINT_VERSION = "wbcx-checkpoint-1"


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "toy_residual_stack"
    d_model: int = 64
    num_heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_queries: int = 10
    explanation_hidden_layers: int = 0
    mask_output_stride: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in ("toy_residual_stack", "deep_residual_50"):
            raise InvalidConfig(f"unknown backbone {self.backbone!r}")
        if self.d_model % self.num_heads != 0:
            raise InvalidConfig("d_model must be divisible by num_heads")
        if self.num_queries < 1:
            raise InvalidConfig("num_queries must be at least 1")
        if self.explanation_hidden_layers not in (0, 2, 4):
            raise InvalidConfig("explanation_hidden_layers must be 0, 2, or 4")
        if self.mask_output_stride not in (2, 4, 8):
            raise InvalidConfig("mask_output_stride must be 2, 4, or 8")


def _gn(channels: int) -> nn.GroupNorm:
    groups = next(g for g in range(min(8, channels), 0, -1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _gn(channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class ToyBackbone(nn.Module):
    """Four stride-2 stages, widths 32/64/128/256; returns all stage features.

    The transformer memory is taken at stride 4 (a 16x16 grid for 64px inputs)
    so queries keep enough spatial resolution to localize and size the cell.
    """

    widths = (32, 64, 128, 256)
    strides = (2, 4, 8, 16)
    memory_index = 1

    def __init__(self):
        super().__init__()
        stages = []
        in_ch = 3
        for w in self.widths:
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, w, 3, stride=2, padding=1),
                _gn(w), nn.ReLU(inplace=True),
                ResidualBlock(w),
            ))
            in_ch = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> List[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats  # strides 2, 4, 8, 16


class DeepBackbone(nn.Module):
    """50-layer residual backbone; weights come from load_backbone_weights."""

    widths = (256, 512, 1024, 2048)
    strides = (4, 8, 16, 32)
    memory_index = 2

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x) -> List[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats  # strides 4, 8, 16, 32


def sinusoidal_position_encoding(d_model: int, h: int, w: int,
                                 device=None) -> torch.Tensor:
    """Fixed 2-D sine/cosine encoding, (h*w, d_model)."""
    half = d_model // 2
    num = half // 2
    omega = 1.0 / (10000 ** (torch.arange(num, dtype=torch.float32, device=device) / num))
    ys = torch.arange(h, dtype=torch.float32, device=device)
    xs = torch.arange(w, dtype=torch.float32, device=device)
    y_enc = torch.cat([torch.sin(ys[:, None] * omega), torch.cos(ys[:, None] * omega)], dim=1)
    x_enc = torch.cat([torch.sin(xs[:, None] * omega), torch.cos(xs[:, None] * omega)], dim=1)
    grid_y = y_enc[:, None, :].expand(h, w, half)
    grid_x = x_enc[None, :, :].expand(h, w, half)
    return torch.cat([grid_y, grid_x], dim=-1).reshape(h * w, d_model)


class QueryAttentionMap(nn.Module):
    """Per-query multi-head attention weights over the encoder memory grid."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)

    def forward(self, queries, memory, h, w):
        b, n, d = queries.shape
        q = self.q_proj(queries).view(b, n, self.num_heads, self.head_dim)
        k = self.k_proj(memory).view(b, h * w, self.num_heads, self.head_dim)
        logits = torch.einsum("bnhd,bmhd->bnhm", q, k) / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)
        return weights.view(b, n, self.num_heads, h, w)


class MaskHead(nn.Module):
    """FPN-style decoder: fuse per-query attention maps with the projected
    memory, upsample with backbone skip connections down to the configured
    output stride, then emit two channels."""

    def __init__(self, d_model: int, num_heads: int, skip_channels: Sequence[int],
                 out_stride: int):
        super().__init__()
        self.out_stride = out_stride
        dims = [d_model + num_heads, d_model, d_model // 2, d_model // 4]
        self.blocks = nn.ModuleList()
        self.skips = nn.ModuleList()
        # skip_channels are backbone widths from stride 8 down to out_stride
        n_up = len(skip_channels)
        for i in range(n_up):
            self.blocks.append(nn.Sequential(
                nn.Conv2d(dims[i], dims[i + 1], 3, padding=1),
                _gn(dims[i + 1]), nn.ReLU(inplace=True)))
            self.skips.append(nn.Conv2d(skip_channels[i], dims[i + 1], 1))
        self.final = nn.Sequential(
            nn.Conv2d(dims[n_up], dims[n_up], 3, padding=1),
            _gn(dims[n_up]), nn.ReLU(inplace=True),
            nn.Conv2d(dims[n_up], 2, 1))

    def forward(self, fused, skip_feats, out_size):
        x = fused
        for block, skip_proj, skip in zip(self.blocks, self.skips, skip_feats):
            x = block(x)
            x = F.interpolate(x, scale_factor=2.0, mode="nearest")
            x = x + skip_proj(skip)
        logits = self.final(x)
        logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
        return logits


def soft_mask_box(mask_probs: torch.Tensor) -> torch.Tensor:
    """Differentiable box estimate from the per-query soft masks.

    Treats per-pixel coverage (the max of the two mask channels) as a mass
    distribution: the box center is its mean and the extent is four standard
    deviations (the tight box of a filled ellipse) plus the same one-pixel
    padding the annotation boxes carry, so the box loss does not pull the
    masks outward to cover the pad. Input (B, N, 2, H, W); returns (B, N, 4)
    as (cx, cy, w, h) in normalized coordinates.
    """
    u = mask_probs.amax(dim=2)
    h, w = u.shape[-2:]
    xs = (torch.arange(w, device=u.device, dtype=u.dtype) + 0.5) / w
    ys = (torch.arange(h, device=u.device, dtype=u.dtype) + 0.5) / h
    ux = u.sum(dim=-2)  # (B, N, W) column masses
    uy = u.sum(dim=-1)  # (B, N, H) row masses
    mass = ux.sum(dim=-1).clamp_min(1e-6)
    cx = (ux * xs).sum(dim=-1) / mass
    cy = (uy * ys).sum(dim=-1) / mass
    var_x = ((ux * xs * xs).sum(dim=-1) / mass - cx * cx).clamp_min(0.0)
    var_y = ((uy * ys * ys).sum(dim=-1) / mass - cy * cy).clamp_min(0.0)
    return torch.stack([cx, cy,
                        4.0 * var_x.sqrt() + 2.0 / w,
                        4.0 * var_y.sqrt() + 2.0 / h], dim=-1)


class Mlp(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, n_layers: int):
        super().__init__()
        layers = []
        d = d_in
        for _ in range(n_layers - 1):
            layers += [nn.Linear(d, d_hidden), nn.ReLU(inplace=True)]
            d = d_hidden
        layers.append(nn.Linear(d, d_out))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class SetPredictionNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        if config.backbone == "toy_residual_stack":
            self.backbone = ToyBackbone()
        else:
            self.backbone = DeepBackbone()
        widths = self.backbone.widths
        self.memory_index = self.backbone.memory_index
        memory_stride = self.backbone.strides[self.memory_index]
        self.input_proj = nn.Conv2d(widths[self.memory_index], d, 1)

        # pre-norm layers: stable to train at a constant learning rate
        # (post-norm stalled on a long plateau before boxes aligned)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=d, nhead=config.num_heads, dim_feedforward=4 * d,
            dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, config.encoder_layers,
                                             norm=nn.LayerNorm(d),
                                             enable_nested_tensor=False)
        dec_layer = nn.TransformerDecoderLayer(
            d_model=d, nhead=config.num_heads, dim_feedforward=4 * d,
            dropout=0.0, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, config.decoder_layers,
                                             norm=nn.LayerNorm(d))
        self.query_embed = nn.Embedding(config.num_queries, d)

        self.class_head = nn.Linear(d, NUM_CLASSES)
        self.box_head = Mlp(d, d, 4, n_layers=3)
        # the box head refines a mask-derived estimate (added in logit space
        # before the sigmoid squash), so its output starts near zero
        with torch.no_grad():
            final = self.box_head.net[-1]
            final.weight.mul_(0.1)
            final.bias.zero_()
        h = config.explanation_hidden_layers
        if h > 0:
            trunk_layers = []
            for _ in range(h):
                trunk_layers += [nn.Linear(d, d), nn.ReLU(inplace=True)]
            self.attr_trunk = nn.Sequential(*trunk_layers)
        else:
            # zero hidden layers: each attribute head is a single linear map
            self.attr_trunk = nn.Identity()
        self.attr_heads = nn.ModuleList(
            [nn.Linear(d, k) for k in ATTRIBUTE_CARDINALITIES])

        # skip features run from just below the memory stride down to
        # mask_output_stride; each one doubles the spatial resolution
        n_up = max(0, int(math.log2(memory_stride // config.mask_output_stride)))
        n_up = min(n_up, self.memory_index)
        skip_channels = [widths[self.memory_index - i] for i in range(1, n_up + 1)]
        self.attention_map = QueryAttentionMap(d, config.num_heads)
        self.mask_head = MaskHead(d, config.num_heads, skip_channels,
                                  config.mask_output_stride)

    def forward(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        """images: (B, 3, H, W) float in [0, 1]. Returns batched slot tensors."""
        b, _, img_h, img_w = images.shape
        feats = self.backbone(images)
        top = self.input_proj(feats[self.memory_index])
        _, d, fh, fw = top.shape
        pos = sinusoidal_position_encoding(d, fh, fw, device=images.device)
        tokens = top.flatten(2).transpose(1, 2) + pos[None]
        memory = self.encoder(tokens)
        queries = self.query_embed.weight[None].expand(b, -1, -1)
        decoded = self.decoder(queries, memory)  # (B, N, d)

        class_logits = self.class_head(decoded)
        trunk = self.attr_trunk(decoded)
        attr_logits = tuple(head(trunk) for head in self.attr_heads)

        n = self.config.num_queries
        attn = self.attention_map(decoded, memory, fh, fw)  # (B, N, heads, fh, fw)
        mem_grid = memory.transpose(1, 2).reshape(b, d, fh, fw)
        fused = torch.cat([
            mem_grid[:, None].expand(b, n, d, fh, fw),
            attn,
        ], dim=2).reshape(b * n, d + self.config.num_heads, fh, fw)
        n_up = len(self.mask_head.blocks)
        skip_feats = []
        for i in range(1, n_up + 1):
            f = feats[self.memory_index - i]
            skip_feats.append(f[:, None].expand(b, n, *f.shape[1:])
                              .reshape(b * n, *f.shape[1:]))
        mask_logits = self.mask_head(fused, skip_feats, (img_h, img_w))
        mask_probs = torch.sigmoid(mask_logits).view(b, n, 2, img_h, img_w)

        # sigmoid-squashed box: mask-derived estimate (in logit space) plus a
        # learned per-query refinement, so localization rides on the mask
        # head's spatial evidence. The estimate is detached: masks are shaped
        # by the segmentation loss alone, while the box loss trains the
        # refinement (box gradients flowing into the mask logits measurably
        # dilated the masks).
        soft = soft_mask_box(mask_probs).detach().clamp(1e-4, 1.0 - 1e-4)
        boxes = torch.sigmoid(torch.logit(soft) + self.box_head(decoded))

        return {
            "class_logits": class_logits,
            "boxes": boxes,
            "mask_probs": mask_probs,
            "attr_logits": attr_logits,
        }


@dataclass
class ModelState:
    network: SetPredictionNet
    config: ModelConfig
    metadata: Dict = field(default_factory=dict)


def build_model(config: ModelConfig) -> ModelState:
    """Deterministic initialization from config.seed."""
    torch.manual_seed(config.seed)
    net = SetPredictionNet(config)
    return ModelState(network=net, config=config, metadata={"seed": config.seed})


def load_backbone_weights(state: ModelState, weight_path: str) -> None:
    """Hook for externally supplied backbone weights (e.g. a pretrained
    50-layer residual network's state dict)."""
    weights = torch.load(weight_path, map_location="cpu", weights_only=True)
    state.network.backbone.load_state_dict(weights)


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arrs = [np.asarray(im) for im in images]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise DimensionError(f"images do not share dimensions: {shapes}")
    shape = next(iter(shapes))
    if len(shape) != 3 or shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) images, got {shape}")
    batch = np.stack(arrs).astype(np.float32)
    if batch.max(initial=0.0) > 1.0:
        batch = batch / 255.0
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def forward_tensors(state: ModelState, images: torch.Tensor) -> Dict[str, torch.Tensor]:
    return state.network(images)


def batch_slots(outputs: Dict[str, torch.Tensor], b: int) -> SlotTensors:
    """Differentiable per-image view of a batched forward output."""
    return SlotTensors(
        class_logits=outputs["class_logits"][b],
        boxes=outputs["boxes"][b],
        mask_probs=outputs["mask_probs"][b],
        attr_logits=tuple(a[b] for a in outputs["attr_logits"]),
    )


def forward(state: ModelState, images: Sequence[np.ndarray]) -> List[PredictionSet]:
    """Evaluation-mode forward pass: one PredictionSet of N slots per image."""
    state.network.eval()
    with torch.no_grad():
        outputs = state.network(images_to_tensor(images))
    return [batch_slots(outputs, b).to_prediction_set() for b in range(len(images))]


@dataclass
class PredictedCell:
    """Inference-time decoding of one slot into an annotation-shaped record.
    nc_ratio is None when the binarized cytoplasm mask is empty."""

    cell_class: CellClass
    box: BoundingBox
    masks: MaskPair
    attributes: ExplanationAttributes
    nc_ratio: Optional[float]
    confidence: float


def _decode_slot(preds: PredictionSet, j: int, mask_threshold: float) -> PredictedCell:
    probs = softmax(preds.class_scores[j])
    cls = CellClass(int(np.argmax(probs[: NUM_CLASSES - 1])))
    conf = float(probs[cls.value])
    masks = MaskPair(
        cytoplasm=binarize_mask(preds.soft_masks[j, 0], mask_threshold),
        nucleus=binarize_mask(preds.soft_masks[j, 1], mask_threshold),
    )
    try:
        nc = compute_nc_ratio(masks)
    except EmptyCytoplasm:
        nc = None
    attr_idx = tuple(int(np.argmax(a[j])) for a in preds.attribute_scores)
    return PredictedCell(
        cell_class=cls,
        box=preds.slot_box(j),
        masks=masks,
        attributes=ExplanationAttributes.from_indices(attr_idx),
        nc_ratio=nc,
        confidence=conf,
    )


def predict_cells(state: ModelState, image: np.ndarray,
                  confidence_threshold: Optional[float] = 0.5,
                  mask_threshold: float = 0.5) -> List[Tuple[PredictedCell, float]]:
    """Decode slots whose best non-EMPTY probability exceeds the threshold.
    With confidence_threshold=None (single-cell mode) the one highest-confidence
    slot is returned regardless of threshold."""
    preds = forward(state, [image])[0]
    probs = softmax(preds.class_scores, axis=-1)
    best_non_empty = probs[:, : NUM_CLASSES - 1].max(axis=1)
    if confidence_threshold is None:
        j = int(np.argmax(best_non_empty))
        cell = _decode_slot(preds, j, mask_threshold)
        return [(cell, cell.confidence)]
    out = []
    for j in np.argsort(-best_non_empty):
        if best_non_empty[j] > confidence_threshold:
            cell = _decode_slot(preds, int(j), mask_threshold)
            out.append((cell, cell.confidence))
    if not out:
        raise NoDetection(f"no slot exceeded threshold {confidence_threshold}")
    return out


def save_checkpoint(state: ModelState, path, extra_metadata: Optional[Dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "state_dict": state.network.state_dict(),
        "metadata": {**state.metadata, **(extra_metadata or {})},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> ModelState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"unrecognized checkpoint version {payload.get('version')!r}")
    config = ModelConfig(**payload["config"])
    state = build_model(config)
    state.network.load_state_dict(payload["state_dict"])
    state.metadata = payload["metadata"]
    return state
