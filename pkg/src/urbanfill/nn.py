"""Partial 3-D convolutions, the encoder/decoder U-Net and the hole/valid loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import formats
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    ParamStore,
    Tensor,
    absolute,
    add,
    batch_norm,
    box_sum,
    concat_channels,
    conv3d,
    conv_output_shape,
    kaiming_uniform,
    leaky_relu,
    mul,
    nearest_indices,
    relu,
    reshape,
    scale,
    sub,
    total,
    upsample_nearest_to,
)

ENCODER_CHANNELS = (64, 128, 256, 512, 512, 512)
DECODER_CHANNELS = (512, 512, 256, 128, 64, 1)
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    padding: tuple[int, int, int]
    has_bn: bool
    activation: str  # "relu", "leaky" or "linear"


def _scaled(channels: int, width_scale: Fraction) -> int:
    return max(1, int(Fraction(channels) * width_scale))


def temporal_padding(T: int) -> int:
    return 2 * ((T - 1) // 4)


@dataclass(frozen=True)
class UNetConfig:
    temporal_dim: int
    width_scale: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "width_scale", Fraction(self.width_scale))
        if self.temporal_dim < 1:
            raise ConfigError(f"temporal_dim must be >= 1, got {self.temporal_dim}")
        if self.width_scale <= 0:
            raise ConfigError(f"width_scale must be positive, got {self.width_scale}")

    def encoder_temporal_sizes(self) -> list[int]:
        """Temporal extent after each encoder."""
        return [t for t, _, _ in self._temporal_chain()]

    def _temporal_chain(self):
        # Encoders 5/6 use a T-deep kernel; it is clamped to the padded input
        # depth (and stride to 1 on a single frame) so small T still builds.
        T = self.temporal_dim
        t = T
        chain = []
        for i in range(6):
            if i < 4:
                k, s, p = 1, 1, 0
            else:
                p = temporal_padding(T)
                k = min(T, t + 2 * p)
                s = 1 if t == 1 else 2
            t = (t + 2 * p - k) // s + 1
            if t <= 0:
                raise ConfigError(f"encoder {i + 1}: nonpositive temporal size for T={T}")
            chain.append((t, k, (s, p)))
        return chain

    def layers(self) -> list[LayerSpec]:
        ws = self.width_scale
        enc_ch = [_scaled(c, ws) for c in ENCODER_CHANNELS]
        dec_ch = [_scaled(c, ws) for c in DECODER_CHANNELS[:-1]] + [1]
        specs = []
        in_ch = 1
        for i, (_, kt, (st, pt)) in enumerate(self._temporal_chain()):
            specs.append(LayerSpec(f"enc{i + 1}", in_ch, enc_ch[i], (kt, 3, 3), (st, 2, 2), (pt, 1, 1),
                                   has_bn=i > 0, activation="relu"))
            in_ch = enc_ch[i]
        skip_ch = [1] + enc_ch[:5]  # input of encoder k is the skip for decoder 7-k
        for j in range(6):
            cin = in_ch + skip_ch[5 - j]
            last = j == 5
            specs.append(LayerSpec(f"dec{j + 1}", cin, dec_ch[j], (1, 3, 3), (1, 1, 1), (0, 1, 1),
                                   has_bn=not last, activation="linear" if last else "leaky"))
            in_ch = dec_ch[j]
        return specs

    def to_pairs(self) -> list[tuple[str, object]]:
        return [("temporal_dim", self.temporal_dim), ("width_scale", str(self.width_scale))]

    @classmethod
    def from_pairs(cls, pairs) -> "UNetConfig":
        d = dict(pairs)
        try:
            return cls(int(d["temporal_dim"]), Fraction(d.get("width_scale", "1")))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


@dataclass
class UNetModel:
    config: UNetConfig
    layers: list[LayerSpec]
    store: ParamStore = field(default_factory=ParamStore)

    @property
    def encoders(self) -> list[LayerSpec]:
        return self.layers[:6]

    @property
    def decoders(self) -> list[LayerSpec]:
        return self.layers[6:]


def build_unet(cfg: UNetConfig, seed: int = 0) -> UNetModel:
    rng = np.random.default_rng(seed)
    layers = cfg.layers()
    store = ParamStore()
    for spec in layers:
        shape = (spec.out_channels, spec.in_channels) + spec.kernel
        store.add(f"{spec.name}.weight", kaiming_uniform(shape, rng))
        store.add(f"{spec.name}.bias", np.zeros(spec.out_channels, dtype=np.float32))
        if spec.has_bn:
            store.add(f"{spec.name}.bn.gamma", np.ones(spec.out_channels, dtype=np.float32))
            store.add(f"{spec.name}.bn.beta", np.zeros(spec.out_channels, dtype=np.float32))
            store.add_buffer(f"{spec.name}.bn.running_mean", np.zeros(spec.out_channels, dtype=np.float32))
            store.add_buffer(f"{spec.name}.bn.running_var", np.ones(spec.out_channels, dtype=np.float32))
    return UNetModel(cfg, layers, store)


# -- partial convolution ---------------------------------------------------

def mask_window_sum(mask: np.ndarray, in_channels: int, kernel, stride, padding) -> np.ndarray:
    """Count of valid input voxels (over all channels) in each output window.

    Zero padding counts as observed zeros, so an all-ones mask gives the full
    window size everywhere and the layer reduces to a plain convolution.
    """
    if mask.shape[1] == 1:
        counts = mask * in_channels
    else:
        counts = mask.sum(axis=1, keepdims=True)
    return box_sum(counts.astype(np.float64), kernel, stride, padding, pad_value=float(in_channels))


def partial_conv3d(x: Tensor, mask: np.ndarray, weight: Tensor, bias: Tensor | None,
                   stride=(1, 1, 1), padding=(0, 0, 0)) -> tuple[Tensor, np.ndarray]:
    """Convolve only valid voxels, renormalised by window size over valid count.

    ``mask`` has shape (B, 1 or C, T, H, W) with values in {0, 1}.  Returns the
    output and the updated (B, 1, ...) mask: a position becomes valid if its
    window saw any valid voxel; positions that saw none output 0.
    """
    if mask.ndim != 5 or mask.shape[0] != x.shape[0] or mask.shape[2:] != x.shape[2:] \
            or mask.shape[1] not in (1, x.shape[1]):
        raise ShapeError(f"mask shape {mask.shape} incompatible with input {x.shape}")
    cin = x.shape[1]
    kernel = weight.shape[2:]
    counts = mask_window_sum(mask, cin, kernel, stride, padding)
    valid = counts > 0
    if not valid.any():
        warnings.warn("partial_conv3d: every output window is fully masked", RuntimeWarning, stacklevel=2)
    winsize = float(np.prod(kernel) * cin)
    ratio = np.where(valid, winsize / np.where(valid, counts, 1.0), 0.0).astype(x.dtype)
    new_mask = valid.astype(x.dtype)
    raw = conv3d(mul(x, Tensor(mask.astype(x.dtype, copy=False))), weight, None, stride, padding)
    out = mul(raw, Tensor(ratio))
    if bias is not None:
        out = add(out, mul(bias_view(bias), Tensor(new_mask)))
    return out, new_mask


def bias_view(bias: Tensor) -> Tensor:
    return reshape(bias, (1, -1, 1, 1, 1)) if bias.ndim == 1 else bias


def _upsample_mask(mask: np.ndarray, target) -> np.ndarray:
    src = mask.shape[2:]
    if tuple(src) == tuple(target):
        return mask
    out = mask
    for axis, (s, d) in enumerate(zip(src, target), start=2):
        out = np.take(out, nearest_indices(s, d), axis=axis)
    return out


def _concat_masks(ma: np.ndarray, ca: int, mb: np.ndarray, cb: int) -> np.ndarray:
    if ma.shape[1] == 1 and mb.shape[1] == 1 and np.array_equal(ma, mb):
        return ma
    B = ma.shape[0]
    full_a = np.broadcast_to(ma, (B, ca) + ma.shape[2:])
    full_b = np.broadcast_to(mb, (B, cb) + mb.shape[2:])
    return np.concatenate([full_a, full_b], axis=1)


def _apply_layer(model: UNetModel, spec: LayerSpec, h: Tensor, m: np.ndarray, training: bool):
    st = model.store
    h, m = partial_conv3d(h, m, st[f"{spec.name}.weight"], st[f"{spec.name}.bias"], spec.stride, spec.padding)
    if spec.has_bn:
        h = batch_norm(h, st[f"{spec.name}.bn.gamma"], st[f"{spec.name}.bn.beta"],
                       st.buffers[f"{spec.name}.bn.running_mean"], st.buffers[f"{spec.name}.bn.running_var"],
                       training)
    if spec.activation == "relu":
        h = relu(h)
    elif spec.activation == "leaky":
        h = leaky_relu(h, LEAKY_SLOPE)
    return h, m


def forward(model: UNetModel, image: Tensor, mask: np.ndarray, training: bool = False):
    """Run the network on a (B, 1, T, H, W) batch.

    Returns the raw prediction tensor and the bottleneck mask.
    """
    if image.ndim != 5 or image.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, T, H, W) input, got {image.shape}")
    if image.shape[2] != model.config.temporal_dim:
        raise ShapeError(f"model expects T={model.config.temporal_dim}, got {image.shape[2]}")
    mask = np.asarray(mask, dtype=image.dtype)
    if mask.shape != image.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match image {image.shape}")
    h = mul(image, Tensor(mask))
    m = mask
    skips = []
    for spec in model.encoders:
        skips.append((h, m))
        nxt = conv_output_shape(h.shape[2:], spec.kernel, spec.stride, spec.padding)
        if any(n <= 0 for n in nxt):
            raise ConfigError(f"{spec.name}: nonpositive output shape {nxt} for input {h.shape[2:]}")
        h, m = _apply_layer(model, spec, h, m, training)
    bottleneck = m
    for j, spec in enumerate(model.decoders):
        skip_h, skip_m = skips[5 - j]
        target = skip_h.shape[2:]
        up = upsample_nearest_to(h, target)
        upm = _upsample_mask(m, target)
        m = _concat_masks(upm, up.shape[1], skip_m, skip_h.shape[1])
        h = concat_channels(up, skip_h)
        h, m = _apply_layer(model, spec, h, m, training)
    return h, bottleneck


def unet_forward(model: UNetModel, image, mask) -> np.ndarray:
    """Dense prediction for one (T, H, W) block (eval mode, no tape)."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float32)
    msk = np.asarray(getattr(mask, "data", mask), dtype=np.float32)
    if img.shape != msk.shape:
        raise ShapeError(f"image {img.shape} and mask {msk.shape} differ")
    out, _ = forward(model, Tensor(img[None, None]), msk[None, None], training=False)
    return out.data[0, 0]


def composite(image, mask, prediction) -> np.ndarray:
    """Observed values on valid voxels, nonnegative predictions in holes."""
    image = np.asarray(getattr(image, "data", image), dtype=np.float32)
    mask = np.asarray(getattr(mask, "data", mask))
    prediction = np.asarray(getattr(prediction, "data", prediction), dtype=np.float32)
    if not (image.shape == mask.shape == prediction.shape):
        raise ShapeError(f"shape mismatch: {image.shape}, {mask.shape}, {prediction.shape}")
    valid = mask.astype(bool)
    return np.where(valid, image, np.maximum(prediction, np.float32(0))).astype(np.float32)


def loss(prediction: Tensor, ground_truth, mask, lam: float):
    """Return (L_total, L_hole, L_valid) with L_total = L_valid + lam * L_hole.

    Each term is the mean absolute residual over its region; an empty hole
    region contributes 0.
    """
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    gt = np.asarray(getattr(ground_truth, "data", ground_truth), dtype=prediction.dtype)
    m = np.asarray(getattr(mask, "data", mask), dtype=prediction.dtype)
    if gt.shape != prediction.shape or m.shape != prediction.shape:
        raise ShapeError(f"loss shapes differ: {prediction.shape}, {gt.shape}, {m.shape}")
    n_valid = float(m.sum())
    n_hole = float(m.size - n_valid)
    if n_valid == 0:
        raise ContractError("loss needs at least one valid voxel")
    resid = absolute(sub(prediction, Tensor(gt)))
    l_valid = scale(total(mul(resid, Tensor(m))), 1.0 / n_valid)
    if n_hole > 0:
        l_hole = scale(total(mul(resid, Tensor(1 - m))), 1.0 / n_hole)
    else:
        l_hole = Tensor(np.zeros((), dtype=prediction.dtype))
    l_total = add(l_valid, scale(l_hole, lam))
    return l_total, l_hole, l_valid


# -- checkpoints -----------------------------------------------------------

def config_path(ckpt_path) -> Path:
    return Path(str(ckpt_path) + ".cfg")


def save_model(model: UNetModel, path, extra: dict | None = None) -> None:
    entries = model.store.to_entries()
    for k, v in (extra or {}).items():
        entries[k] = np.asarray(v, dtype=np.float32).reshape(-1)
    formats.write_uckp(path, entries)
    formats.write_kv(config_path(path), model.config.to_pairs())


def load_model(path) -> tuple[UNetModel, dict]:
    cfg = UNetConfig.from_pairs(formats.read_kv(config_path(path)))
    model = build_unet(cfg)
    entries = formats.read_uckp(path)
    model.store.load_entries(entries)
    known = set(model.store.params) | {"adam.step"}
    extra = {k: v for k, v in entries.items()
             if k not in known and not k.startswith(("buf/", "adam.m/", "adam.v/"))}
    return model, extra
