"""MLP with an explicit feature map and a bias-free linear head.

The network computes ``f(x; theta) = h(x; theta_h) @ theta_L`` where ``h`` is
a stack of affine layers each followed by the activation. The last hidden
width is the feature dimension ``d``.

Parameter values may be numpy arrays or :class:`~fseb.autodiff.Tensor`
objects bound to a tape; :func:`features` and :func:`predict` work on both.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}
PROVENANCES = ("random-init", "pretrained-checkpoint", "current-train-snapshot")

CHECKPOINT_MAGIC = b"FSEB"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    init_scheme: str | None = None  # None picks he for relu, glorot for tanh
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise ValueError("hidden_widths must name at least one layer")
        if self.input_dim < 1 or self.output_dim < 1 or min(self.hidden_widths) < 1:
            raise ValueError(f"all dimensions must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_scheme not in (None, "he", "glorot"):
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_widths[-1]

    @property
    def resolved_init(self) -> str:
        if self.init_scheme is not None:
            return self.init_scheme
        return "he" if self.activation == "relu" else "glorot"

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical parameter names and shapes, in flattening order."""
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_widths):
            shapes[f"hidden.{i}.weight"] = (fan_in, width)
            shapes[f"hidden.{i}.bias"] = (width,)
            fan_in = width
        shapes["head"] = (fan_in, self.output_dim)
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes().values())


@dataclass
class ModelParams:
    """Network parameters ``theta = (theta_h, theta_L)``."""

    config: MlpConfig
    theta_h: dict[str, object]
    theta_L: object

    def as_dict(self) -> dict[str, object]:
        return {**self.theta_h, "head": self.theta_L}

    @classmethod
    def from_dict(cls, config: MlpConfig, values: Mapping[str, object]) -> ModelParams:
        theta_h = {k: values[k] for k in config.layer_shapes() if k != "head"}
        return cls(config, theta_h, values["head"])

    def map(self, fn) -> ModelParams:
        return ModelParams.from_dict(self.config, {k: fn(k, v) for k, v in self.as_dict().items()})

    def copy(self) -> ModelParams:
        return self.map(lambda _, v: np.array(_data(v), dtype=np.float64))

    def on_tape(self, tape: ad.Tape) -> ModelParams:
        """Bind every tensor as a named leaf of ``tape``."""
        return self.map(lambda name, v: tape.leaf(name, _data(v)))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(_data(v)) for v in self.as_dict().values()])

    @classmethod
    def from_flat(cls, config: MlpConfig, vector) -> ModelParams:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != config.n_params:
            raise ValueError(f"expected {config.n_params} values, got {vector.size}")
        values, offset = {}, 0
        for name, shape in config.layer_shapes().items():
            n = int(np.prod(shape))
            values[name] = vector[offset : offset + n].reshape(shape).copy()
            offset += n
        return cls.from_dict(config, values)


@dataclass(frozen=True)
class FeatureSnapshot:
    """Frozen feature-extractor parameters ``phi0`` defining the context kernel."""

    config: MlpConfig
    phi0: Mapping[str, np.ndarray]
    provenance: str = "random-init"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, ad.Tensor) else np.asarray(v, dtype=np.float64)


def init_params(config: MlpConfig) -> ModelParams:
    """Random initialization; glorot-normal or he-normal weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1217]))
    scheme = config.resolved_init
    values = {}
    for name, shape in config.layer_shapes().items():
        if name.endswith(".bias"):
            values[name] = np.zeros(shape)
            continue
        fan_in, fan_out = shape
        var = 2.0 / (fan_in + fan_out) if scheme == "glorot" else 2.0 / fan_in
        values[name] = rng.normal(0.0, np.sqrt(var), size=shape)
    return ModelParams.from_dict(config, values)


def _check_input(x, config: MlpConfig):
    x = x if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    shape = x.shape
    if len(shape) != 2 or shape[1] != config.input_dim:
        raise ad.ShapeError(f"expected inputs of shape (B, {config.input_dim}), got {shape}")
    return x


def features(x, theta_h, config: MlpConfig | None = None) -> ad.Tensor:
    """Feature map ``h(x; theta_h)``, shape ``B x d``.

    ``theta_h`` is a :class:`ModelParams` (its feature part is used), a
    :class:`FeatureSnapshot` (result is constant), or a plain mapping of the
    hidden-layer tensors together with ``config``.
    """
    if isinstance(theta_h, ModelParams):
        config, layers = theta_h.config, theta_h.theta_h
    elif isinstance(theta_h, FeatureSnapshot):
        config, layers = theta_h.config, theta_h.phi0
    else:
        if config is None:
            raise TypeError("config is required when theta_h is a plain mapping")
        layers = theta_h
    x = _check_input(x, config)
    act = ACTIVATIONS[config.activation]
    out = ad.as_tensor(x)
    for i in range(len(config.hidden_widths)):
        out = act(ad.add(ad.matmul(out, layers[f"hidden.{i}.weight"]), layers[f"hidden.{i}.bias"]))
    return out


def predict(x, params: ModelParams) -> ad.Tensor:
    """Logits ``h(x; theta_h) @ theta_L``, shape ``B x K``."""
    return ad.matmul(features(x, params), params.theta_L)


def softmax(logits) -> np.ndarray:
    z = _data(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(x, params: ModelParams) -> np.ndarray:
    return softmax(predict(x, params).data)


def snapshot_feature_params(source, provenance: str | None = None, config: MlpConfig | None = None) -> FeatureSnapshot:
    """Deep, read-only copy of the feature-extractor parameters.

    ``source`` is a :class:`ModelParams` or a checkpoint path (then ``config``
    is required and the provenance defaults to ``pretrained-checkpoint``).
    """
    if isinstance(source, (str, Path)):
        if config is None:
            raise TypeError("config is required to snapshot from a checkpoint")
        params = load_checkpoint(source, config)
        provenance = provenance or "pretrained-checkpoint"
    else:
        params = source
        provenance = provenance or "random-init"
    frozen = {}
    for name, value in params.theta_h.items():
        arr = np.array(_data(value), dtype=np.float64, copy=True)
        arr.setflags(write=False)
        frozen[name] = arr
    return FeatureSnapshot(params.config, MappingProxyType(frozen), provenance)


def perturb_params(params: ModelParams, sigma: float, seed: int) -> ModelParams:
    """``theta + sigma * eps`` with standard-normal ``eps``; sigma=0 returns ``params``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return params
    rng = np.random.default_rng(seed)

    def shift(_, v):
        noise = sigma * rng.standard_normal(np.shape(_data(v)))
        return ad.add(v, noise) if isinstance(v, ad.Tensor) else _data(v) + noise

    return params.map(shift)


# ---------------------------------------------------------------------------
# checkpoint I/O: "FSEB", u32 version, then per tensor
#   u32 name length, utf-8 name, u32 rank, u64 extents, little-endian f64 data


def save_checkpoint(params: ModelParams, path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in params.as_dict().items():
        arr = np.ascontiguousarray(_data(value), dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}Q", buf, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated at offset {pos}") from exc
    return out


def load_checkpoint(path, config: MlpConfig) -> ModelParams:
    tensors = read_checkpoint(path)
    expected = config.layer_shapes()
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} expected shape {shape}, found {tensors[name].shape}")
    extra = set(tensors) - set(expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    return ModelParams.from_dict(config, tensors)
