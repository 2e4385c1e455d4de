"""Small residual convolutional networks for 32x32-scale image classification.

The architectures follow the classic 6n+2-layer residual design for small
images: a 3x3 stem, three stages of basic blocks at widths w/2w/4w with
spatial downsampling between stages, global average pooling, and a linear
head.  Depth 8, 14, or 20 with width 12-16 keeps parameter counts in the
0.1M-0.3M range, which trains to convergence in minutes on a single CPU core.

Two extra affordances support the pruning defense:

* ``channel_mask`` — a persistent buffer multiplied onto the final stage's
  post-activation feature map, so individual channels can be disabled without
  rewriting weights.
* ``final_activation_means`` — per-channel mean activation of that same
  feature map, the dormancy statistic used to rank channels for pruning.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidSpecError

__all__ = ["ResidualNet", "make_model", "parse_arch"]


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class ResidualNet(nn.Module):
    """6n+2-layer residual classifier taking inputs in [0, 1], NCHW."""

    def __init__(
        self,
        depth: int = 14,
        width: int = 16,
        n_classes: int = 10,
        in_channels: int = 3,
    ) -> None:
        super().__init__()
        if depth < 8 or (depth - 2) % 6 != 0:
            raise InvalidSpecError(
                f"depth must be 6n+2 with n >= 1 (8, 14, 20, ...), got {depth}"
            )
        if width < 4:
            raise InvalidSpecError(f"width must be at least 4, got {width}")
        n_blocks = (depth - 2) // 6
        self.depth = depth
        self.width = width
        self.n_classes = n_classes

        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.stage1 = self._stage(width, width, n_blocks, stride=1)
        self.stage2 = self._stage(width, 2 * width, n_blocks, stride=2)
        self.stage3 = self._stage(2 * width, 4 * width, n_blocks, stride=2)
        self.register_buffer("channel_mask", torch.ones(4 * width))
        self.fc = nn.Linear(4 * width, n_classes)

    @staticmethod
    def _stage(c_in: int, c_out: int, n_blocks: int, stride: int) -> nn.Sequential:
        blocks = [BasicBlock(c_in, c_out, stride)]
        blocks += [BasicBlock(c_out, c_out, 1) for _ in range(n_blocks - 1)]
        return nn.Sequential(*blocks)

    @property
    def n_final_channels(self) -> int:
        return int(self.channel_mask.numel())

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Final-stage post-activation feature map with the channel mask applied."""
        h = x * 2.0 - 1.0
        h = self.stem(h)
        h = self.stage1(h)
        h = self.stage2(h)
        h = self.stage3(h)
        return h * self.channel_mask.view(1, -1, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x).mean(dim=(2, 3)))

    @torch.no_grad()
    def final_activation_means(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel mean activation of the final stage over a batch."""
        return self.features(x).mean(dim=(0, 2, 3))

    @torch.no_grad()
    def prune_channels(self, channels) -> None:
        """Disable the given final-stage channels in place."""
        idx = torch.as_tensor(list(channels), dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.n_final_channels):
            raise InvalidSpecError(
                f"channel indices must lie in [0, {self.n_final_channels})"
            )
        self.channel_mask[idx] = 0.0


def parse_arch(arch: str) -> int:
    """Map an architecture name like ``resnet14`` to its depth."""
    if not arch.startswith("resnet"):
        raise InvalidSpecError(f"unknown architecture {arch!r}; expected resnet<depth>")
    try:
        depth = int(arch[len("resnet") :])
    except ValueError as exc:
        raise InvalidSpecError(f"unknown architecture {arch!r}") from exc
    return depth


def make_model(
    arch: str = "resnet14",
    width: int = 16,
    n_classes: int = 10,
    in_channels: int = 3,
) -> ResidualNet:
    return ResidualNet(
        depth=parse_arch(arch),
        width=width,
        n_classes=n_classes,
        in_channels=in_channels,
    )
