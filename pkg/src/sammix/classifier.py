"""Auxiliary slice classifier: conv encoder, focal loss, class-activation maps.

The classifier ends in global average pooling and a single linear layer, so
the linear weights double as per-channel importances for building a
class-activation map from the final feature grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ClassifierConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64)
    blocks_per_stage: int = 1
    padding: str = "same"  # "same" keeps the stride-2 grid, "valid" uses no padding
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if not self.channels:
            raise ValueError("need at least one stage")


class _ResidualBlock(nn.Module):
    def __init__(self, ch: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ConvClassifier(nn.Module):
    """Stride-2 conv stages -> final feature grid -> GAP -> linear logits."""

    def __init__(self, cfg: ClassifierConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg or ClassifierConfig()
        stages = []
        in_ch = 1
        pad = 1 if self.cfg.padding == "same" else 0
        for ch in self.cfg.channels:
            layers: list[nn.Module] = [nn.Conv2d(in_ch, ch, 3, stride=2, padding=pad), nn.ReLU()]
            layers += [_ResidualBlock(ch) for _ in range(self.cfg.blocks_per_stage)]
            stages.append(nn.Sequential(*layers))
            in_ch = ch
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(in_ch, self.cfg.num_classes)

    @property
    def feature_dim(self) -> int:
        return self.cfg.channels[-1]

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, H, W) -> logits (B, C) and the final feature grid (B, D, h, w)."""
        if image.ndim != 4 or image.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(image.shape)}")
        x = image
        min_side = 3 if self.cfg.padding == "valid" else 1
        for stage in self.stages:
            if x.shape[-2] < min_side or x.shape[-1] < min_side:
                raise ValueError(
                    f"input {tuple(image.shape)} too small for {len(self.stages)} stride-2 stages"
                )
            x = stage(x)
        f_last = x
        pooled = f_last.mean(dim=(2, 3))  # (B, D)
        logits = self.fc(pooled)
        return logits, f_last


def focal_loss(
    logits: torch.Tensor,
    label: torch.Tensor | int,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """-alpha * (1 - p_t)^gamma * log(p_t) with p_t = softmax(logits)[label].

    Accepts a single (C,) logit vector with an int label, or a (B, C) batch
    with a (B,) label vector; batches reduce by the mean.  Stable for large
    logit magnitudes (log-softmax, never a bare softmax-then-log).
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None]
        label = torch.as_tensor([int(label)], device=logits.device)
    else:
        label = torch.as_tensor(label, device=logits.device)
        if label.ndim != 1 or label.shape[0] != logits.shape[0]:
            raise ValueError("label batch must match logits batch")
    if label.min() < 0 or label.max() >= logits.shape[-1]:
        raise ValueError("label out of range")
    log_p = F.log_softmax(logits, dim=-1)
    log_pt = log_p.gather(1, label[:, None].long())[:, 0]
    pt = log_pt.exp()
    loss = -alpha * (1.0 - pt) ** gamma * log_pt
    return loss[0] if squeeze else loss.mean()


def compute_cam(
    f_last: torch.Tensor,
    fc_weights: torch.Tensor,
    class_index: int,
    out_size: tuple[int, int],
) -> torch.Tensor:
    """Class-activation map: channel-weighted sum of the final feature grid.

    The weighted sum is rectified, bilinearly upsampled (aligned corners) to
    out_size, and scaled by its max so the result lies in [0, 1].  An
    everywhere-nonpositive sum yields an all-zero map.
    """
    if f_last.ndim != 3:
        raise ValueError(f"f_last must be (D, h, w), got {tuple(f_last.shape)}")
    if fc_weights.ndim != 2 or fc_weights.shape[1] != f_last.shape[0]:
        raise ValueError(
            f"fc_weights {tuple(fc_weights.shape)} does not match feature dim {f_last.shape[0]}"
        )
    if not 0 <= class_index < fc_weights.shape[0]:
        raise ValueError(f"class_index {class_index} out of range")
    w = fc_weights[class_index]
    cam = torch.tensordot(w, f_last, dims=([0], [0]))  # (h, w)
    cam = F.relu(cam)
    cam = F.interpolate(cam[None, None], size=tuple(out_size), mode="bilinear", align_corners=True)[0, 0]
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam
