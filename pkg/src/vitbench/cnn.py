"""Desk-scale CNN baselines: plain conv stacks, residual blocks, and
depthwise-separable stacks (miniature vgg / resnet / mobilenet analogues).

No batch normalization anywhere: plain conv+relu keeps the models
mode-free and easy to gradient-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

CNN_KINDS = ("vgg-mini", "resnet-mini", "mobilenet-mini")


@dataclass
class CnnConfig:
    kind: str = "vgg-mini"
    stage_widths: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    num_classes: int = 3
    image_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.kind not in CNN_KINDS:
            raise ConfigurationError(
                f"unknown cnn kind {self.kind!r}; expected one of {CNN_KINDS}"
            )
        if any(w <= 0 for w in self.stage_widths) or not self.stage_widths:
            raise ConfigurationError("stage widths must be positive")
        if self.image_size % (2 ** len(self.stage_widths)):
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by "
                f"2^{len(self.stage_widths)} for the stride schedule"
            )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "stage_widths": list(self.stage_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "num_classes": self.num_classes,
            "image_size": self.image_size, "channels": self.channels,
        }


def _conv(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=1, groups=1) -> Tensor:
    y = T.conv2d(x, w, stride=stride, padding=padding, groups=groups)
    return T.add(y, T.reshape(b, (1, b.shape[0], 1, 1)))


def residual_block(x: Tensor, params: dict, stride: int = 1) -> Tensor:
    """relu(conv2(relu(conv1(x))) + shortcut(x)).

    The shortcut is the identity when shape is preserved, otherwise a
    strided 1x1 projection (params then carry "proj.w"/"proj.b").
    """
    h = T.relu(_conv(x, params["conv1.w"], params["conv1.b"], stride=stride, padding=1))
    h = _conv(h, params["conv2.w"], params["conv2.b"], stride=1, padding=1)
    if "proj.w" in params:
        sc = _conv(x, params["proj.w"], params["proj.b"], stride=stride, padding=0)
    else:
        sc = x
    return T.relu(T.add(h, sc))


def depthwise_separable(x: Tensor, params: dict, stride: int = 1) -> Tensor:
    """relu(pointwise(relu(depthwise(x)))); depthwise groups = Cin."""
    cin = x.shape[1]
    h = T.relu(
        _conv(x, params["dw.w"], params["dw.b"], stride=stride, padding=1, groups=cin)
    )
    return T.relu(_conv(h, params["pw.w"], params["pw.b"], stride=1, padding=0))


class CnnModel:
    """A built CNN with named parameters and a batched forward pass."""

    def __init__(self, config: CnnConfig, seed: int = 0):
        self.config = config
        self.kind = config.kind
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def normal(*shape):
            # He-scaled for conv kernels (fan-in = Cin*Kh*Kw), small-normal
            # for the linear head; keeps relu preactivations well away from
            # the kink through deep stacks
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                sigma = np.sqrt(2.0 / fan_in)
            else:
                sigma = 0.02
            return Tensor(rng.normal(0.0, sigma, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        p = self.params
        widths = config.stage_widths
        nb = config.blocks_per_stage
        if config.kind == "vgg-mini":
            cin = config.channels
            for s, w in enumerate(widths):
                for j in range(nb):
                    p[f"stages.{s}.{j}.w"] = normal(w, cin, 3, 3)
                    p[f"stages.{s}.{j}.b"] = zeros(w)
                    cin = w
            spatial = config.image_size // (2 ** len(widths))
            feat = widths[-1] * spatial * spatial
            p["head.w"] = normal(feat, config.num_classes)
            p["head.b"] = zeros(config.num_classes)
        elif config.kind == "resnet-mini":
            p["stem.w"] = normal(widths[0], config.channels, 3, 3)
            p["stem.b"] = zeros(widths[0])
            cin = widths[0]
            for s, w in enumerate(widths):
                for j in range(nb):
                    stride = 2 if j == 0 else 1
                    pre = f"stages.{s}.{j}."
                    p[pre + "conv1.w"] = normal(w, cin, 3, 3)
                    p[pre + "conv1.b"] = zeros(w)
                    p[pre + "conv2.w"] = normal(w, w, 3, 3)
                    p[pre + "conv2.b"] = zeros(w)
                    if stride != 1 or cin != w:
                        p[pre + "proj.w"] = normal(w, cin, 1, 1)
                        p[pre + "proj.b"] = zeros(w)
                    cin = w
            p["head.w"] = normal(widths[-1], config.num_classes)
            p["head.b"] = zeros(config.num_classes)
        else:  # mobilenet-mini
            p["stem.w"] = normal(widths[0], config.channels, 3, 3)
            p["stem.b"] = zeros(widths[0])
            cin = widths[0]
            for s, w in enumerate(widths):
                for j in range(nb):
                    pre = f"stages.{s}.{j}."
                    p[pre + "dw.w"] = normal(cin, 1, 3, 3)
                    p[pre + "dw.b"] = zeros(cin)
                    p[pre + "pw.w"] = normal(w, cin, 1, 1)
                    p[pre + "pw.b"] = zeros(w)
                    cin = w
            p["head.w"] = normal(widths[-1], config.num_classes)
            p["head.b"] = zeros(config.num_classes)

    def block_params(self, stage: int, j: int) -> dict:
        pre = f"stages.{stage}.{j}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def head_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("head.")]

    def forward_batch(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        x = Tensor(np.asarray(images))
        p = self.params
        nb = cfg.blocks_per_stage
        if cfg.kind == "vgg-mini":
            for s in range(len(cfg.stage_widths)):
                for j in range(nb):
                    x = T.relu(_conv(x, p[f"stages.{s}.{j}.w"], p[f"stages.{s}.{j}.b"]))
                x = T.max_pool2d(x, 2)
            feat = T.reshape(x, (x.shape[0], -1))
        elif cfg.kind == "resnet-mini":
            x = T.relu(_conv(x, p["stem.w"], p["stem.b"]))
            for s in range(len(cfg.stage_widths)):
                for j in range(nb):
                    x = residual_block(x, self.block_params(s, j), stride=2 if j == 0 else 1)
            feat = T.global_avg_pool(x)
        else:
            x = T.relu(_conv(x, p["stem.w"], p["stem.b"]))
            for s in range(len(cfg.stage_widths)):
                for j in range(nb):
                    x = depthwise_separable(x, self.block_params(s, j), stride=2 if j == 0 else 1)
            feat = T.global_avg_pool(x)
        return T.add(T.matmul(feat, p["head.w"]), p["head.b"])


def build_model(config: CnnConfig, seed: int = 0) -> CnnModel:
    return CnnModel(config, seed=seed)
