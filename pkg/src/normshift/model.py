"""ConvNet classifier with pluggable normalization, plus checkpoint I/O.

Layout: [conv -> norm -> ReLU -> maxpool] per conv stage, flatten, hidden
fully-connected layers with ReLU, and a linear head. The post-ReLU output of
the first hidden layer is the feature tap used by the augmentation cost.

Checkpoint file (little-endian)::

    b"NSCK" | u32 version=1 | u32 len + UTF-8 JSON header
    | u32 tensor count | per tensor: u16 len + name, u8 rank, u32 dims[rank], f32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .norms import ASRState, NormConfig, NormState, apply_norm, bottleneck_sizes, glorot_uniform, init_norm
from .numcore import ops
from .numcore.ops import ShapeError
from .numcore.tensor import DEFAULT_DTYPE, Param, Tensor

CHECKPOINT_MAGIC = b"NSCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dims: tuple = (3, 24, 24)
    conv_channels: tuple = (16, 32)
    kernel_size: int = 3
    pool: int = 2
    fc_widths: tuple = (128,)
    num_classes: int = 10
    norm: NormConfig = field(default_factory=NormConfig)
    seed: int = 0

    def __post_init__(self):
        self.input_dims = tuple(int(v) for v in self.input_dims)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.fc_widths = tuple(int(v) for v in self.fc_widths)
        if isinstance(self.norm, dict):
            self.norm = NormConfig(**self.norm)
        if len(self.input_dims) != 3:
            raise ValueError(f"input_dims must be (C, H, W), got {self.input_dims}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.kernel_size < 1 or self.pool < 1:
            raise ValueError("kernel_size and pool must be positive")
        if not self.fc_widths:
            raise ValueError("at least one hidden fully-connected layer is required for the feature tap")

    @property
    def pad(self) -> int:
        return self.kernel_size // 2

    def spatial_dims(self) -> list[tuple[int, int]]:
        """(H, W) after each conv stage; raises if any collapses below 1."""
        _, h, w = self.input_dims
        dims = []
        k, p = self.kernel_size, self.pad
        for i, _ in enumerate(self.conv_channels):
            h, w = h + 2 * p - k + 1, w + 2 * p - k + 1
            if h < self.pool or w < self.pool:
                raise ValueError(f"spatial dims collapse below 1 at conv stage {i + 1}")
            h, w = (h - self.pool) // self.pool + 1, (w - self.pool) // self.pool + 1
            dims.append((h, w))
        return dims

    def flat_features(self) -> int:
        h, w = self.spatial_dims()[-1] if self.conv_channels else self.input_dims[1:]
        c = self.conv_channels[-1] if self.conv_channels else self.input_dims[0]
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["conv_channels"] = list(self.conv_channels)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["norm"] = NormConfig(**d.get("norm", {}))
        return cls(**d)


@dataclass
class ConvStage:
    weight: Param
    bias: Param
    norm: Optional[NormState]


class Model:
    def __init__(self, config: ModelConfig, stages: list[ConvStage], fcs: list[tuple[Param, Param]]):
        self.config = config
        self.stages = stages
        self.fcs = fcs

    def params(self) -> list[Param]:
        out = []
        for st in self.stages:
            out += [st.weight, st.bias]
            if st.norm is not None:
                out += st.norm.params()
        for w, b in self.fcs:
            out += [w, b]
        return out

    def norm_layers(self) -> list[tuple[str, NormState]]:
        return [(f"norm{i + 1}", st.norm) for i, st in enumerate(self.stages) if st.norm is not None]

    def asr_layers(self) -> list[tuple[str, ASRState]]:
        return [(name, n) for name, n in self.norm_layers() if isinstance(n, ASRState)]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, norm in self.norm_layers():
            for key, arr in norm.buffers().items():
                out[f"{name}.{key}"] = arr
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.params()}
        out.update(self.buffers())
        return out

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params()))

    def astype(self, dtype) -> "Model":
        """Convert every parameter and buffer in place (used for 64-bit checks)."""
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for _, norm in self.norm_layers():
            for key, arr in norm.buffers().items():
                setattr(norm, key, arr.astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in sorted(self.named_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __call__(self, x, mode: str = "eval", want_features: bool = False):
        return forward(self, x, mode, want_features)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_model(config: ModelConfig, dtype=DEFAULT_DTYPE) -> Model:
    """Deterministically initialize a model from ``config.seed``."""
    config.spatial_dims()
    rng = np.random.default_rng(config.seed)
    c_in = config.input_dims[0]
    k = config.kernel_size
    stages = []
    for i, c_out in enumerate(config.conv_channels):
        w = Param(f"conv{i + 1}.weight", _he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        b = Param(f"conv{i + 1}.bias", np.zeros(c_out, dtype=dtype))
        norm = init_norm(config.norm.kind, c_out, config.norm, prefix=f"norm{i + 1}", rng=rng, dtype=dtype)
        stages.append(ConvStage(w, b, norm))
        c_in = c_out
    fcs = []
    d_in = config.flat_features()
    for j, width in enumerate(config.fc_widths):
        fcs.append((Param(f"fc{j + 1}.weight", _he_normal(rng, (width, d_in), d_in, dtype)),
                    Param(f"fc{j + 1}.bias", np.zeros(width, dtype=dtype))))
        d_in = width
    j = len(config.fc_widths) + 1
    fcs.append((Param(f"fc{j}.weight", glorot_uniform(rng, config.num_classes, d_in, dtype)),
                Param(f"fc{j}.bias", np.zeros(config.num_classes, dtype=dtype))))
    return Model(config, stages, fcs)


def forward(model: Model, x, mode: str = "eval", want_features: bool = False):
    """Return (logits, features) where features is the first hidden fc
    activation (post-ReLU) when requested, else None."""
    cfg = model.config
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    if d.ndim != 4 or tuple(d.shape[1:]) != cfg.input_dims:
        raise ShapeError(f"expected input (N, {', '.join(map(str, cfg.input_dims))}), got {d.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = x if isinstance(x, Tensor) else Tensor(d)
    for st in model.stages:
        h = ops.conv2d(h, st.weight, st.bias, stride=1, pad=cfg.pad)
        h = apply_norm(st.norm, h, mode)
        h = ops.relu(h)
        h = ops.maxpool2d(h, cfg.pool)
    h = ops.reshape(h, (d.shape[0], -1))
    features = None
    for j, (w, b) in enumerate(model.fcs[:-1]):
        h = ops.relu(ops.fully_connected(h, w, b))
        if j == 0:
            features = h
    w, b = model.fcs[-1]
    logits = ops.fully_connected(h, w, b)
    return logits, (features if want_features else None)


def predict_proba(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(model, images[i:i + batch_size], "eval")
        out.append(ops.softmax(logits.data.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


# ----------------------------------------------------------------------------
# parameter accounting


def norm_param_count(kind: str, c: int, config: NormConfig) -> int:
    """Closed-form trainable-parameter count of one norm layer over C channels."""
    if kind == "none":
        return 0
    if kind in ("bn", "bn_test", "in", "ln", "gn"):
        return 2 * c
    if kind == "sn":
        return 6 + 2 * c
    c_stan, c_rescale = bottleneck_sizes(c, config)
    total = 2 * c  # gamma_bias, beta_bias (or plain gamma, beta)
    if kind in ("as", "asr"):
        # shared encoder C->C_stan, two decoders C_stan->C, two residual logits
        total += (c * c_stan + c_stan) + 2 * (c_stan * c + c) + 2
    if kind in ("ar", "asr"):
        total += (c * c_rescale + c_rescale) + 2 * (c_rescale * c + c)
        if config.pretrain_variant:
            total += 2
    return total


def closed_form_param_count(config: ModelConfig) -> int:
    k = config.kernel_size
    total = 0
    c_in = config.input_dims[0]
    for c in config.conv_channels:
        total += c * c_in * k * k + c + norm_param_count(config.norm.kind, c, config.norm)
        c_in = c
    d_in = config.flat_features()
    for width in (*config.fc_widths, config.num_classes):
        total += d_in * width + width
        d_in = width
    return total


def parameter_report(config: ModelConfig) -> dict:
    """Implementation counts for BN vs ASR on the same backbone, with overhead."""
    counts = {}
    for kind in ("bn", "asr"):
        cfg = ModelConfig.from_dict({**config.to_dict(), "norm": {**config.norm.to_dict(), "kind": kind}})
        counts[kind] = build_model(cfg).num_params()
    overhead = counts["asr"] - counts["bn"]
    return {"bn": counts["bn"], "asr": counts["asr"], "overhead": overhead,
            "overhead_pct": 100.0 * overhead / counts["bn"]}


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["config"])

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}: need {n} bytes at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return Checkpoint(version, header, tensors)


def save_checkpoint(model: Model, path, meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    header = {"config": model.config.to_dict(), "meta": meta or {}}
    tensors = dict(model.named_tensors())
    if extra_tensors:
        tensors.update(extra_tensors)
    write_checkpoint(path, header, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    try:
        config = ckpt.config
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header lacks a valid model config: {exc}") from exc
    model = build_model(config)
    for p in model.params():
        if p.name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {p.name!r}")
        arr = ckpt.tensors[p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"tensor {p.name!r} has shape {arr.shape}, config implies {p.data.shape}")
        p.data = arr.copy()
        p.grad = np.zeros_like(p.data)
    for name, norm in model.norm_layers():
        for key, arr in norm.buffers().items():
            full = f"{name}.{key}"
            if full not in ckpt.tensors or ckpt.tensors[full].shape != arr.shape:
                raise CheckpointError(f"checkpoint buffer {full!r} missing or mis-shaped")
            arr[...] = ckpt.tensors[full]
    return model


def load_checkpoint(path) -> Model:
    return model_from_checkpoint(read_checkpoint(path))
