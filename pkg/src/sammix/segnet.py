"""Miniature promptable segmenter with low-rank adapters.

A frozen patch-embedding transformer encodes the image; box corners enter as
Fourier-positional tokens; a small two-way transformer decodes several mask
hypotheses plus quality scores.  The only trainable parts of the encoder are
rank-r adapter pairs on the attention q/v projections, so fine-tuning touches
a fraction of a percent of the encoder weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class SegnetConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    lora_rank: int = 8
    lora_scale: float = 1.0
    lora_targets: tuple[str, ...] = ("q", "v")
    num_masks: int = 3
    decoder_depth: int = 2
    freeze_decoder: bool = False
    freeze_prompt_encoder: bool = False

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} must be a multiple of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 (mask upscaling)")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        unknown = set(self.lora_targets) - {"q", "k", "v", "out"}
        if unknown:
            raise ValueError(f"unknown adapter targets {sorted(unknown)}")


def lora_apply(
    x: torch.Tensor,
    w_base: torch.Tensor,
    lora_a: torch.Tensor,
    lora_b: torch.Tensor,
    scale: float = 1.0,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """W x + scale * B (A x), with A (r, d_in) and B (d_out, r)."""
    out = F.linear(x, w_base, bias)
    return out + scale * F.linear(F.linear(x, lora_a), lora_b)


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank update.

    A is Gaussian (std 0.02), B starts at zero, so at initialization the
    layer computes exactly the frozen base map.
    """

    def __init__(self, base: nn.Linear, rank: int, scale: float) -> None:
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        self.scale = scale
        self.adapters_enabled = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.adapters_enabled:
            return self.base(x)
        return lora_apply(x, self.base.weight, self.lora_a, self.lora_b, self.scale, self.base.bias)

    def adapter_parameter_count(self) -> int:
        return self.lora_a.numel() + self.lora_b.numel()

    def dense_parameter_count(self) -> int:
        return self.base.weight.numel()


class Attention(nn.Module):
    """Multi-head attention usable for both self- and cross-attention."""

    def __init__(self, dim: int, num_heads: int, cfg: SegnetConfig | None = None) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads

        def make(name: str) -> nn.Module:
            layer = nn.Linear(dim, dim)
            if cfg is not None and name in cfg.lora_targets:
                return LoraLinear(layer, cfg.lora_rank, cfg.lora_scale)
            return layer

        self.q = make("q")
        self.k = make("k")
        self.v = make("v")
        self.out = make("out")

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor) -> torch.Tensor:
        b, nq, d = x_q.shape
        nk = x_kv.shape[1]
        q = self.q(x_q).reshape(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(x_kv).reshape(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(x_kv).reshape(b, nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out)


class _EncoderBlock(nn.Module):
    def __init__(self, cfg: SegnetConfig) -> None:
        super().__init__()
        d = cfg.embed_dim
        hidden = int(d * cfg.mlp_ratio)
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.num_heads, cfg)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patch-embedding transformer; every non-adapter parameter is frozen."""

    def __init__(self, cfg: SegnetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.grid = cfg.image_size // cfg.patch_size
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(1, d, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid * self.grid, d) * 0.02)
        self.blocks = nn.ModuleList(_EncoderBlock(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        for name, p in self.named_parameters():
            if "lora_" not in name:
                p.requires_grad_(False)

    def set_adapters_enabled(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, LoraLinear):
                m.adapters_enabled = enabled

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) -> (B, grid*grid, d) position-aware dense embeddings."""
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W), got {tuple(images.shape)}")
        if images.shape[-2] != self.cfg.image_size or images.shape[-1] != self.cfg.image_size:
            raise ValueError(
                f"encoder built for {self.cfg.image_size}px inputs, got {tuple(images.shape)}"
            )
        x = self.patch_embed(images)               # (B, d, g, g)
        x = x.flatten(2).transpose(1, 2)           # (B, g*g, d)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class PromptEncoder(nn.Module):
    """Box corners -> sparse tokens via random-Fourier position features.

    Each box contributes two tokens (top-left, bottom-right), each the sum of
    the corner's positional encoding and a learned corner-type embedding.  An
    empty box list yields a single learned no-prompt token.
    """

    def __init__(self, cfg: SegnetConfig) -> None:
        super().__init__()
        d = cfg.embed_dim
        self.register_buffer("fourier", torch.randn(2, d // 2))
        self.corner_type = nn.Parameter(torch.randn(2, d) * 0.02)
        self.no_prompt = nn.Parameter(torch.randn(1, d) * 0.02)

    def encode_points(self, points: torch.Tensor) -> torch.Tensor:
        """(..., 2) coordinates in [0, 1] -> (..., d) Fourier features."""
        proj = (2.0 * points - 1.0) @ self.fourier * (2.0 * math.pi)
        return torch.cat([proj.sin(), proj.cos()], dim=-1)

    def forward(self, boxes_norm: torch.Tensor) -> torch.Tensor:
        """(n, 4) normalized (x_min, y_min, x_max, y_max) -> (2n, d) tokens; (1, d) when n = 0."""
        if boxes_norm.numel() == 0:
            return self.no_prompt
        if boxes_norm.ndim != 2 or boxes_norm.shape[1] != 4:
            raise ValueError(f"boxes must be (n, 4), got {tuple(boxes_norm.shape)}")
        if boxes_norm.min() < 0.0 or boxes_norm.max() > 1.0:
            raise ValueError("normalized box coordinates must lie in [0, 1]")
        n = boxes_norm.shape[0]
        corners = boxes_norm.reshape(n, 2, 2)      # [[x_min, y_min], [x_max, y_max]]
        tokens = self.encode_points(corners) + self.corner_type[None, :, :]
        return tokens.reshape(2 * n, -1)


class _TwoWayBlock(nn.Module):
    """Tokens attend to themselves and the image; the image attends back."""

    def __init__(self, cfg: SegnetConfig) -> None:
        super().__init__()
        d = cfg.embed_dim
        self.self_attn = Attention(d, cfg.num_heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_t2i = Attention(d, cfg.num_heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, int(d * cfg.mlp_ratio)), nn.GELU(), nn.Linear(int(d * cfg.mlp_ratio), d))
        self.norm3 = nn.LayerNorm(d)
        self.cross_i2t = Attention(d, cfg.num_heads)
        self.norm4 = nn.LayerNorm(d)

    def forward(self, tokens: torch.Tensor, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens))
        tokens = self.norm2(tokens + self.cross_t2i(tokens, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(image, tokens))
        return tokens, image


class MaskDecoder(nn.Module):
    """Mask tokens + score token + prompt tokens against the dense grid.

    Produces num_masks sigmoid masks at full image resolution and one
    predicted quality score per mask, also through a sigmoid.
    """

    def __init__(self, cfg: SegnetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        k = cfg.num_masks
        self.mask_tokens = nn.Parameter(torch.randn(k, d) * 0.02)
        self.score_token = nn.Parameter(torch.randn(1, d) * 0.02)
        self.blocks = nn.ModuleList(_TwoWayBlock(cfg) for _ in range(cfg.decoder_depth))
        self.final_attn = Attention(d, cfg.num_heads)
        self.final_norm = nn.LayerNorm(d)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 2, 2, stride=2),
            nn.GELU(),
            nn.ConvTranspose2d(d // 2, d // 4, 2, stride=2),
        )
        self.hyper = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d // 4))
        self.score_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, k))

    def forward(self, dense: torch.Tensor, sparse: torch.Tensor, grid: int) -> tuple[torch.Tensor, torch.Tensor]:
        """dense (g*g, d), sparse (m, d) -> masks (K, H, W) in [0, 1], scores (K,)."""
        k = self.cfg.num_masks
        tokens = torch.cat([self.mask_tokens, self.score_token, sparse], dim=0)[None]
        image = dense[None]
        for block in self.blocks:
            tokens, image = block(tokens, image)
        tokens = self.final_norm(tokens + self.final_attn(tokens, image))

        feat = image[0].transpose(0, 1).reshape(self.cfg.embed_dim, grid, grid)
        feat = self.upscale(feat[None])[0]                      # (d/4, 4g, 4g)
        hyper = self.hyper(tokens[0, :k])                       # (K, d/4)
        logits = torch.einsum("kc,chw->khw", hyper, feat)
        logits = F.interpolate(
            logits[None], size=(self.cfg.image_size, self.cfg.image_size),
            mode="bilinear", align_corners=True,
        )[0]
        masks = torch.sigmoid(logits)
        scores = torch.sigmoid(self.score_head(tokens[0, k]))
        return masks, scores


@dataclass
class SegPrediction:
    """Inference output: all mask hypotheses and their predicted quality."""

    masks: np.ndarray   # (K, H, W) float32 in [0, 1]
    scores: np.ndarray  # (K,) float32 in [0, 1]


class Segnet(nn.Module):
    """Encoder + prompt encoder + decoder glued into one promptable model."""

    def __init__(self, cfg: SegnetConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg or SegnetConfig()
        self.encoder = ImageEncoder(self.cfg)
        self.prompt_encoder = PromptEncoder(self.cfg)
        self.decoder = MaskDecoder(self.cfg)
        if self.cfg.freeze_prompt_encoder:
            for p in self.prompt_encoder.parameters():
                p.requires_grad_(False)
        if self.cfg.freeze_decoder:
            for p in self.decoder.parameters():
                p.requires_grad_(False)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode(self, dense: torch.Tensor, boxes_norm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One sample's dense embeddings (g*g, d) + boxes (n, 4) -> masks, scores."""
        sparse = self.prompt_encoder(boxes_norm.to(dense.dtype))
        return self.decoder(dense, sparse, self.encoder.grid)

    def forward(self, image: torch.Tensor, boxes_norm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(1, 1, H, W) or (1, H, W) image + (n, 4) boxes -> masks (K, H, W), scores (K,)."""
        if image.ndim == 3:
            image = image[None]
        dense = self.encode_image(image)[0]
        return self.decode(dense, boxes_norm)

    @torch.no_grad()
    def predict(self, image: np.ndarray, boxes_norm: np.ndarray, per_box_decode: bool = False) -> SegPrediction:
        """Numpy-in, numpy-out inference.

        By default all boxes enter the decoder together.  With per_box_decode,
        each box is decoded on its own, the best-scoring hypothesis per box is
        kept, and the result is a single union mask (pixelwise max) whose
        score is the best participating score.
        """
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
        dense = self.encode_image(t)[0]
        boxes_t = torch.from_numpy(np.asarray(boxes_norm, dtype=np.float32).reshape(-1, 4))
        if per_box_decode and boxes_t.shape[0] > 1:
            best_masks, best_scores = [], []
            for i in range(boxes_t.shape[0]):
                masks, scores = self.decode(dense, boxes_t[i : i + 1])
                k = int(torch.argmax(scores))
                best_masks.append(masks[k])
                best_scores.append(scores[k])
            union = torch.stack(best_masks).max(dim=0).values
            return SegPrediction(
                masks=union[None].numpy().astype(np.float32),
                scores=np.array([float(torch.stack(best_scores).max())], dtype=np.float32),
            )
        masks, scores = self.decode(dense, boxes_t)
        return SegPrediction(
            masks=masks.numpy().astype(np.float32), scores=scores.numpy().astype(np.float32)
        )

    def trainable_parameter_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def frozen_parameter_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft overlap loss: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.reshape(-1)
    g = target.reshape(-1).to(pred.dtype)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps)


def seg_training_loss(
    mask_probs: torch.Tensor,
    scores: torch.Tensor,
    gt: torch.Tensor,
    score_weight: float = 1.0,
) -> tuple[torch.Tensor, dict]:
    """Supervise the best hypothesis only, and regress scores to achieved quality.

    The mask term is the minimum dice loss over the K hypotheses; the score
    term is the mean squared error between each predicted score and that
    hypothesis's achieved (detached) soft overlap.
    """
    k = mask_probs.shape[0]
    losses = torch.stack([dice_loss(mask_probs[i], gt) for i in range(k)])
    mask_term = losses.min()
    achieved = (1.0 - losses).detach().clamp(0.0, 1.0)
    score_term = ((scores - achieved) ** 2).mean()
    detail = {
        "dice_losses": losses.detach(),
        "best_index": int(torch.argmin(losses)),
        "score_term": float(score_term.detach()),
    }
    return mask_term + score_weight * score_term, detail


def select_best_mask(pred: SegPrediction) -> tuple[np.ndarray, float]:
    """Highest-scoring hypothesis; ties go to the lowest index."""
    k = int(np.argmax(pred.scores))
    return pred.masks[k], float(pred.scores[k])
