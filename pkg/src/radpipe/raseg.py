"""Recurrent-attention segmentation network.

Encoder: stride-2 3x3x3 convolutions (instance norm, PReLU, spatial
dropout) doubling the channel count per level.  Bottleneck features run
through stacked ConvLSTM layers that treat the depth axis as a
sequence.  The decoder mirrors the encoder with transposed convolutions;
at each step the matching encoder skip is recalibrated against the
rasterized tumor bounding box b via

    f_out = f_in + sigmoid(conv(b)) * f_in

and concatenated before upsampling.  A 1x1x1 head produces two-channel
(background, tumor) logits at input resolution.  The decoder also
exposes a feature tap (default: second-to-last step) for the downstream
classification stage.

At inference without a tumor box, b defaults to all ones and the learned
sigmoid gain applies uniformly (weak-supervision fallback).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ndiff
from .errors import DimensionError, ValidationError
from .ndiff import ConvLSTMParams, Tensor
from .rng import make_rng


@dataclass
class ModelConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16, 32, 64)
    strides: tuple[int, ...] = (2, 2, 2)
    convlstm_layers: int = 3
    convlstm_kernel: tuple[int, int] = (3, 3)
    convlstm_hidden: Optional[int] = None
    dropout_rate: float = 0.1
    out_classes: int = 2
    feature_tap_step: Optional[int] = None
    attention_conv_kernel: int = 3

    def validate(self) -> "ModelConfig":
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) < 2:
            raise ValidationError(f"channels needs >= 2 levels, got {self.channels}")
        if any(a >= b for a, b in zip(self.channels, self.channels[1:])):
            raise ValidationError(f"channels must be strictly increasing, got {self.channels}")
        if len(self.strides) != len(self.channels) - 1:
            raise ValidationError(
                f"need {len(self.channels) - 1} strides for {len(self.channels)} channel levels, "
                f"got {len(self.strides)}"
            )
        if any(s < 1 for s in self.strides):
            raise ValidationError(f"strides must be >= 1, got {self.strides}")
        if self.in_channels < 1:
            raise ValidationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.convlstm_layers < 1:
            raise ValidationError(f"convlstm_layers must be >= 1, got {self.convlstm_layers}")
        kh, kw = self.convlstm_kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValidationError(
                f"convlstm_kernel must be odd and >= 1 for same-padding, got {self.convlstm_kernel}"
            )
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.out_classes < 2:
            raise ValidationError(f"out_classes must be >= 2, got {self.out_classes}")
        tap = self.resolved_tap_step()
        if not 0 <= tap < self.decoder_steps():
            raise ValidationError(
                f"feature_tap_step {tap} out of range [0, {self.decoder_steps() - 1}]"
            )
        if self.attention_conv_kernel < 1 or self.attention_conv_kernel % 2 == 0:
            raise ValidationError(
                f"attention_conv_kernel must be odd, got {self.attention_conv_kernel}"
            )
        return self

    def decoder_steps(self) -> int:
        return len(self.strides)

    def resolved_tap_step(self) -> int:
        if self.feature_tap_step is not None:
            return int(self.feature_tap_step)
        return max(0, self.decoder_steps() - 2)

    def lstm_hidden(self) -> int:
        return self.convlstm_hidden if self.convlstm_hidden is not None else self.channels[-1]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "convlstm_layers": self.convlstm_layers,
            "convlstm_kernel": list(self.convlstm_kernel),
            "convlstm_hidden": self.convlstm_hidden,
            "dropout_rate": self.dropout_rate,
            "out_classes": self.out_classes,
            "feature_tap_step": self.feature_tap_step,
            "attention_conv_kernel": self.attention_conv_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            in_channels=int(d.get("in_channels", 1)),
            channels=tuple(d["channels"]),
            strides=tuple(d["strides"]),
            convlstm_layers=int(d.get("convlstm_layers", 3)),
            convlstm_kernel=tuple(d.get("convlstm_kernel", (3, 3))),
            convlstm_hidden=d.get("convlstm_hidden"),
            dropout_rate=float(d.get("dropout_rate", 0.1)),
            out_classes=int(d.get("out_classes", 2)),
            feature_tap_step=d.get("feature_tap_step"),
            attention_conv_kernel=int(d.get("attention_conv_kernel", 3)),
        )
        return cfg.validate()


@dataclass
class RaSegModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def lstm_params(self, layer: int) -> ConvLSTMParams:
        return ConvLSTMParams(
            w_x=self.params[f"lstm{layer}.w_x"],
            w_h=self.params[f"lstm{layer}.w_h"],
            bias=self.params[f"lstm{layer}.bias"],
        )


def _he_conv(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def build_model(cfg: ModelConfig, seed: int = 0) -> RaSegModel:
    """Deterministic initialization: He-normal convs, zero biases,
    unit instance-norm scale, PReLU slope 0.25, ConvLSTM forget bias 1."""
    cfg.validate()
    rng = make_rng(seed, 0x5E6)
    params: dict[str, Tensor] = {}

    def param(name: str, value: np.ndarray) -> None:
        params[name] = Tensor(value, requires_grad=True, name=name)

    def conv_block(prefix: str, c_in: int, c_out: int, k: int) -> None:
        param(f"{prefix}.conv.w", _he_conv(rng, (c_out, c_in, k, k, k), c_in * k ** 3))
        param(f"{prefix}.conv.b", np.zeros(c_out, dtype=np.float32))
        param(f"{prefix}.norm.gamma", np.ones(c_out, dtype=np.float32))
        param(f"{prefix}.norm.beta", np.zeros(c_out, dtype=np.float32))
        param(f"{prefix}.act.slope", np.full(c_out, 0.25, dtype=np.float32))

    chans = cfg.channels
    c_prev = cfg.in_channels
    for i, c in enumerate(chans[:-1]):
        conv_block(f"enc{i}", c_prev, c, 3)
        c_prev = c
    conv_block("bottom", c_prev, chans[-1], 3)

    hid = cfg.lstm_hidden()
    kh, kw = cfg.convlstm_kernel
    c_in = chans[-1]
    for layer in range(cfg.convlstm_layers):
        param(
            f"lstm{layer}.w_x",
            _he_conv(rng, (4 * hid, c_in, 1, kh, kw), c_in * kh * kw),
        )
        param(
            f"lstm{layer}.w_h",
            _he_conv(rng, (4 * hid, hid, 1, kh, kw), hid * kh * kw),
        )
        bias = np.zeros(4 * hid, dtype=np.float32)
        bias[hid : 2 * hid] = 1.0  # forget gate opens at init
        param(f"lstm{layer}.bias", bias)
        c_in = hid

    ka = cfg.attention_conv_kernel
    for i, c in enumerate(chans[:-1]):
        param(f"attn{i}.conv.w", _he_conv(rng, (c, 1, ka, ka, ka), ka ** 3))
        param(f"attn{i}.conv.b", np.zeros(c, dtype=np.float32))

    # decoder step j consumes (carry + skip) channels and upsamples to the
    # next shallower level; the deepest skip pairs with the recurrent output
    carry = hid
    for j in range(cfg.decoder_steps()):
        skip_c = chans[len(chans) - 2 - j]
        target_c = chans[len(chans) - 2 - j]
        param(
            f"dec{j}.tconv.w",
            _he_conv(rng, (carry + skip_c, target_c, 3, 3, 3), (carry + skip_c) * 27),
        )
        param(f"dec{j}.tconv.b", np.zeros(target_c, dtype=np.float32))
        param(f"dec{j}.norm.gamma", np.ones(target_c, dtype=np.float32))
        param(f"dec{j}.norm.beta", np.zeros(target_c, dtype=np.float32))
        param(f"dec{j}.act.slope", np.full(target_c, 0.25, dtype=np.float32))
        carry = target_c

    param("head.conv.w", _he_conv(rng, (cfg.out_classes, carry, 1, 1, 1), carry))
    param("head.conv.b", np.zeros(cfg.out_classes, dtype=np.float32))

    return RaSegModel(config=cfg, params=params)


def attention_recalibrate(f_in: Tensor, b_t: Tensor, w: Tensor, b: Tensor,
                          kernel: int = 3) -> Tensor:
    """Skip recalibration f_out = f_in + sigmoid(conv(b_t)) * f_in."""
    if b_t.shape[1] != 1:
        raise DimensionError(f"attention box input must be single-channel, got {b_t.shape}")
    if b_t.shape[2:] != f_in.shape[2:]:
        raise DimensionError(
            f"attention box spatial dims {b_t.shape[2:]} != features {f_in.shape[2:]}"
        )
    gate = ndiff.sigmoid(ndiff.conv3d(b_t, w, b, stride=1, padding=kernel // 2))
    return ndiff.add(f_in, ndiff.mul(gate, f_in))


def recurrent_block(bottleneck: Tensor, layers: list[ConvLSTMParams]) -> Tensor:
    """Stacked ConvLSTM passes along the depth axis.

    Hidden and cell states start at zero on every call; the full hidden
    sequence of each layer feeds the next, so output dims match input
    dims whenever hidden channels equal input channels.
    """
    seq = bottleneck
    depth = seq.shape[2]
    for lp in layers:
        hid = lp.hidden_channels
        B, _, _, H, W = seq.shape
        h = Tensor(np.zeros((B, hid, 1, H, W), dtype=seq.data.dtype))
        c = Tensor(np.zeros((B, hid, 1, H, W), dtype=seq.data.dtype))
        outs = []
        for t in range(depth):
            x_t = seq[:, :, t : t + 1]
            h, c = ndiff.convlstm_cell(x_t, h, c, lp)
            outs.append(h)
        seq = ndiff.concat(outs, axis=2) if depth > 1 else outs[0]
    return seq


def _bbox_pyramid(bbox_data: np.ndarray, strides: tuple[int, ...]) -> list[np.ndarray]:
    """Nearest-decimated copies of the box volume at each skip resolution."""
    levels = []
    cur = bbox_data
    for s in strides:
        cur = cur[:, :, s // 2 :: s, s // 2 :: s, s // 2 :: s]
        levels.append(cur)
    return levels


def _check_inputs(cfg: ModelConfig, image: Tensor, bbox: Optional[Tensor]) -> Tensor:
    if image.ndim != 5:
        raise DimensionError(f"image must be rank 5 (B,C,D,H,W), got {image.shape}")
    if image.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"image channels {image.shape[1]} != configured in_channels {cfg.in_channels}"
        )
    total = int(np.prod(cfg.strides))
    for ax, n in zip("DHW", image.shape[2:]):
        if n % total != 0:
            raise DimensionError(
                f"spatial dim {ax}={n} must be divisible by the cumulative stride {total}"
            )
    if bbox is None:
        bbox = Tensor(np.ones((image.shape[0], 1) + image.shape[2:], dtype=image.data.dtype))
    if bbox.shape[1] != 1:
        raise DimensionError(f"bbox volume must be single-channel, got {bbox.shape}")
    if bbox.shape[0] != image.shape[0] or bbox.shape[2:] != image.shape[2:]:
        raise DimensionError(
            f"bbox geometry {bbox.shape} does not match image {image.shape}"
        )
    return bbox


def _forward_impl(
    model: RaSegModel,
    image: Tensor,
    bbox: Optional[Tensor],
    mode: str,
    rng: Optional[np.random.Generator],
) -> tuple[Tensor, list[Tensor]]:
    cfg = model.config
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValidationError("training-mode forward needs an rng for dropout")
    bbox = _check_inputs(cfg, image, bbox)
    p = model.params

    def block(prefix: str, x: Tensor, conv_fn) -> Tensor:
        x = conv_fn(x)
        x = ndiff.instance_norm(x, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"])
        x = ndiff.prelu(x, p[f"{prefix}.act.slope"])
        return ndiff.spatial_dropout(x, cfg.dropout_rate, rng, training)

    skips: list[Tensor] = []
    x = image
    for i, s in enumerate(cfg.strides):
        x = block(
            f"enc{i}",
            x,
            lambda t, i=i, s=s: ndiff.conv3d(
                t, p[f"enc{i}.conv.w"], p[f"enc{i}.conv.b"], stride=s, padding=1
            ),
        )
        skips.append(x)

    x = block(
        "bottom",
        x,
        lambda t: ndiff.conv3d(t, p["bottom.conv.w"], p["bottom.conv.b"], stride=1, padding=1),
    )

    x = recurrent_block(x, [model.lstm_params(layer) for layer in range(cfg.convlstm_layers)])

    box_levels = _bbox_pyramid(bbox.data, cfg.strides)

    decoder_outputs: list[Tensor] = []
    for j in range(cfg.decoder_steps()):
        level = len(cfg.channels) - 2 - j  # encoder level whose skip we consume
        skip = skips[level]
        b_lvl = Tensor(box_levels[level])
        skip = attention_recalibrate(
            skip,
            b_lvl,
            p[f"attn{level}.conv.w"],
            p[f"attn{level}.conv.b"],
            kernel=cfg.attention_conv_kernel,
        )
        x = ndiff.concat_channel([x, skip])
        s = cfg.strides[level]
        x = block(
            f"dec{j}",
            x,
            lambda t, j=j, s=s: ndiff.tconv3d(
                t,
                p[f"dec{j}.tconv.w"],
                p[f"dec{j}.tconv.b"],
                stride=s,
                padding=1,
                output_padding=s - 1,
            ),
        )
        decoder_outputs.append(x)

    logits = ndiff.conv3d(x, p["head.conv.w"], p["head.conv.b"], stride=1, padding=0)
    return logits, decoder_outputs


def forward(
    model: RaSegModel,
    image: Tensor,
    bbox: Optional[Tensor] = None,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Full pass to class logits at input resolution."""
    logits, _ = _forward_impl(model, image, bbox, mode, rng)
    return logits


def extract_decoder_features(
    model: RaSegModel,
    image: Tensor,
    bbox: Optional[Tensor] = None,
    step: Optional[int] = None,
) -> Tensor:
    """Activation emitted by a decoder step (default: the configured tap).

    Always runs in eval mode, so repeated calls are deterministic.
    """
    cfg = model.config
    tap = cfg.resolved_tap_step() if step is None else int(step)
    if not 0 <= tap < cfg.decoder_steps():
        raise ValidationError(
            f"decoder step {tap} invalid; valid range is 0..{cfg.decoder_steps() - 1}"
        )
    with ndiff.no_grad():
        _, decoder_outputs = _forward_impl(model, image, bbox, "eval", None)
    return decoder_outputs[tap]
