"""3D U-Net for per-voxel tumor logits, the cross-entropy loss, and the
checkpoint archive format.

Encoder levels double the feature count and halve the resolution with
max pooling; decoder levels upsample (nearest), concatenate the skip
tensor, and apply the same double convolution. A 1x1x1 head emits one
logit per class.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CorruptArchive, InvalidConfig, ShapeMismatch

CHECKPOINT_FORMAT = "pancdetect-checkpoint/1"
# The head starts near zero so an untrained net predicts ~uniform softmax.
_HEAD_INIT_SCALE = 0.01


@dataclass
class UNetConfig:
    in_channels: int = 4
    num_classes: int = 2
    depth: int = 4
    base_features: int = 32
    norm: str = "instance"
    nonlinearity: str = "relu"
    padding_mode: str = "zeros"
    seed: int = 0
    # initial softmax probability of the non-background classes; None
    # starts every class at equal probability
    foreground_prior: float | None = None

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise InvalidConfig("need in_channels >= 1 and num_classes >= 2")
        if self.depth < 1 or self.base_features < 1:
            raise InvalidConfig("depth and base_features must be >= 1")
        if self.norm not in ("instance", "batch"):
            raise InvalidConfig(f"norm must be 'instance' or 'batch', got {self.norm!r}")
        if self.nonlinearity not in ("relu", "leaky_relu"):
            raise InvalidConfig(f"nonlinearity must be 'relu' or 'leaky_relu', got {self.nonlinearity!r}")
        if self.padding_mode not in ("zeros", "circular", "replicate", "reflect"):
            raise InvalidConfig(f"unsupported padding_mode {self.padding_mode!r}")
        if self.foreground_prior is not None and not 0.0 < self.foreground_prior < 1.0:
            raise InvalidConfig(f"foreground_prior must lie in (0, 1), got {self.foreground_prior}")

    @property
    def stride(self):
        return 2 ** (self.depth - 1)

    def check_input_dims(self, dims):
        bad = [d for d in dims if d % self.stride]
        if bad:
            raise InvalidConfig(
                f"input dims {tuple(dims)} must be divisible by 2^(depth-1) = {self.stride}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown unet keys: {sorted(unknown)}")
        return cls(**d)


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, cfg: UNetConfig):
        layers = []
        for i, o in ((cin, cout), (cout, cout)):
            layers.append(nn.Conv3d(i, o, 3, padding=1, padding_mode=cfg.padding_mode))
            layers.append(
                nn.InstanceNorm3d(o, affine=True) if cfg.norm == "instance" else nn.BatchNorm3d(o)
            )
            layers.append(nn.ReLU(inplace=True) if cfg.nonlinearity == "relu" else nn.LeakyReLU(0.01, inplace=True))
        super().__init__(*layers)


class UNet3D(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.config = cfg
        widths = [cfg.base_features * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.encoders.append(DoubleConv(cin, w, cfg))
            cin = w
        self.decoders = nn.ModuleList(
            DoubleConv(widths[i] + widths[i + 1], widths[i], cfg) for i in reversed(range(cfg.depth - 1))
        )
        self.head = nn.Conv3d(widths[0], cfg.num_classes, 1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        skips.pop()
        for dec in self.decoders:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[2:], mode="nearest")
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


def _init_parameters(model: UNet3D, seed):
    gen = torch.Generator().manual_seed(int(seed))
    slope = 0.01 if model.config.nonlinearity == "leaky_relu" else 0.0
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(
                m.weight, a=slope, mode="fan_in", nonlinearity=model.config.nonlinearity, generator=gen
            )
            nn.init.zeros_(m.bias)
    with torch.no_grad():
        model.head.weight.mul_(_HEAD_INIT_SCALE)
        prior = model.config.foreground_prior
        if prior is not None:
            k = model.config.num_classes - 1
            model.head.bias[1:] = float(np.log(prior / (k * (1.0 - prior))))


def build(config: UNetConfig, input_dims=None) -> UNet3D:
    """Build a U-Net with He (fan-in) initialization from ``config.seed``.

    When ``input_dims`` is given, it is checked for divisibility by the
    total downsampling stride.
    """
    if input_dims is not None:
        config.check_input_dims(input_dims)
    model = UNet3D(config)
    _init_parameters(model, config.seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: UNet3D, x) -> np.ndarray:
    """Logits (num_classes, Z, X, Y) for a single (C, Z, X, Y) input."""
    cfg = model.config
    arr = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if arr.ndim != 4 or arr.shape[0] != cfg.in_channels:
        raise ShapeMismatch(
            f"expected a ({cfg.in_channels}, Z, X, Y) input, got {tuple(arr.shape)}"
        )
    try:
        cfg.check_input_dims(arr.shape[1:])
    except InvalidConfig as exc:
        raise ShapeMismatch(str(exc)) from None
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(arr[None])[0]
    finally:
        model.train(was_training)
    return out.numpy()


def _weights_tensor(class_weights, like):
    if class_weights is None:
        return None
    return torch.as_tensor(class_weights, dtype=like.dtype)


def loss(logits, y, class_weights=None):
    """Mean per-voxel cross-entropy between softmax(logits) and the label.

    ``logits`` is (K, Z, X, Y) or batched (B, K, Z, X, Y); ``y`` holds
    integer class indices with the matching spatial shape. Torch inputs
    keep their autograd graph; numpy inputs give a float.
    """
    as_numpy = not isinstance(logits, torch.Tensor)
    lg = torch.as_tensor(np.asarray(logits) if as_numpy else logits)
    if not lg.is_floating_point():
        lg = lg.double()
    target = torch.as_tensor(np.asarray(y) if not isinstance(y, torch.Tensor) else y).long()
    if lg.ndim == 4:
        lg, target = lg[None], target[None]
    if lg.ndim != 5 or target.shape != lg.shape[:1] + lg.shape[2:]:
        raise ShapeMismatch(f"logits {tuple(lg.shape)} incompatible with label {tuple(target.shape)}")
    value = F.cross_entropy(lg, target, weight=_weights_tensor(class_weights, lg))
    return float(value) if as_numpy else value


def loss_gradient(logits, y) -> np.ndarray:
    """Closed-form d(loss)/d(logits) for unweighted loss: (softmax - onehot) / N."""
    lg = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if lg.shape[1:] != y.shape:
        raise ShapeMismatch(f"logits {lg.shape} incompatible with label {y.shape}")
    shifted = lg - lg.max(axis=0, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=0, keepdims=True)
    onehot = np.stack([(y == k) for k in range(lg.shape[0])]).astype(np.float64)
    return (p - onehot) / y.size


def softmax(logits, axis=0):
    lg = np.asarray(logits, dtype=np.float64)
    e = np.exp(lg - lg.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# -- checkpoints -------------------------------------------------------------


def _json_bytes(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, model: UNet3D, metadata=None, state=None):
    """Write config, named parameter arrays and metadata to an ``.npz``.

    ``state`` defaults to ``model.state_dict()``. The write goes to a
    temporary file in the target directory and is renamed into place.
    """
    path = Path(path)
    state = model.state_dict() if state is None else state
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.items()}
    arrays["__format__"] = _json_bytes(CHECKPOINT_FORMAT)
    arrays["__config__"] = _json_bytes(model.config.to_dict())
    arrays["__meta__"] = _json_bytes(metadata or {})
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    """Return ``(model, metadata)``; parameters are restored bit-exactly."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            files = set(npz.files)
            if "__format__" not in files or json.loads(npz["__format__"].tobytes()) != CHECKPOINT_FORMAT:
                raise CorruptArchive(f"{path}: not a {CHECKPOINT_FORMAT} archive")
            config = UNetConfig.from_dict(json.loads(npz["__config__"].tobytes()))
            meta = json.loads(npz["__meta__"].tobytes())
            state = {k[len("param/"):]: torch.from_numpy(npz[k].copy()) for k in files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptArchive(f"{path}: unreadable checkpoint ({exc})") from exc
    model = UNet3D(config)
    model.load_state_dict(state)
    return model, meta
