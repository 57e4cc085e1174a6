"""Synthetic glyph benchmark with leveled corruptions and style shifts.

The source domain is K parametric stroke glyphs rendered anti-aliased on a
24x24 canvas with pose jitter, replicated to 3 channels. Target domains are
produced by six corruption types at five intensity levels, or by one of
three style shifts.

Dataset file (little-endian)::

    b"NSDS" | u32 version=1 | u32 len + UTF-8 JSON manifest | u32 n
    | u32 C, H, W | f32 images[n*C*H*W] | u32 labels[n]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 24
CHANNELS = 3

CORRUPTION_TYPES = ("gaussian_noise", "impulse_noise", "box_blur", "contrast", "brightness", "pixelate")
STYLE_NAMES = ("invert", "texture_bg", "dilate")

# frozen intensity tables, indexed by level - 1
CORRUPTION_TABLE = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # noise std
    "impulse_noise": (0.01, 0.02, 0.04, 0.07, 0.10),  # fraction of pixels hit
    "box_blur": (1, 2, 3, 4, 6),  # passes of a 3x3 box filter
    "contrast": (0.6, 0.45, 0.3, 0.2, 0.1),  # contrast factor around the image mean
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive offset, clipped
    "pixelate": (2, 3, 4, 6, 8),  # block size
}

# stroke templates in [-1, 1]^2 (x right, y down); one list of segments per class
GLYPHS = (
    [((-.6, -.6), (.6, -.6)), ((.6, -.6), (.6, .6)), ((.6, .6), (-.6, .6)), ((-.6, .6), (-.6, -.6))],
    [((0, -.7), (0, .7))],
    [((-.7, 0), (.7, 0))],
    [((-.6, -.6), (.6, .6)), ((-.6, .6), (.6, -.6))],
    [((0, -.7), (0, .7)), ((-.7, 0), (.7, 0))],
    [((0, -.65), (.65, .55)), ((.65, .55), (-.65, .55)), ((-.65, .55), (0, -.65))],
    [((-.5, -.7), (-.5, .6)), ((-.5, .6), (.6, .6))],
    [((-.6, -.6), (.6, -.6)), ((0, -.6), (0, .7))],
    [((-.6, -.6), (.6, -.6)), ((.6, -.6), (-.6, .6)), ((-.6, .6), (.6, .6))],
    [((-.6, -.6), (0, .65)), ((0, .65), (.6, -.6))],
)


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], dict(self.manifest))


@dataclass(frozen=True)
class DomainSpec:
    kind: str  # source | corruption | style
    name: str = ""
    level: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind == "source":
            return
        if self.kind == "corruption":
            if self.name not in CORRUPTION_TYPES:
                raise ValueError(f"unknown corruption type {self.name!r}")
            if not 1 <= self.level <= 5:
                raise ValueError(f"corruption level must be in 1..5, got {self.level}")
        elif self.kind == "style":
            if self.name not in STYLE_NAMES:
                raise ValueError(f"unknown style {self.name!r}")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "DomainSpec":
        """Parse ``source``, ``corruption:<type>:<level>`` or ``style:<name>``."""
        parts = text.strip().split(":")
        if parts == ["source"]:
            return cls("source", seed=seed)
        if parts[0] == "corruption" and len(parts) == 3:
            try:
                level = int(parts[2])
            except ValueError as exc:
                raise ValueError(f"bad corruption level in {text!r}") from exc
            return cls("corruption", parts[1], level, seed)
        if parts[0] == "style" and len(parts) == 2:
            return cls("style", parts[1], 0, seed)
        raise ValueError(f"cannot parse domain spec {text!r}")

    @property
    def tag(self) -> str:
        if self.kind == "source":
            return "source"
        if self.kind == "corruption":
            return self.name
        return f"style:{self.name}"

    def __str__(self) -> str:
        if self.kind == "source":
            return "source"
        if self.kind == "corruption":
            return f"corruption:{self.name}:{self.level}"
        return f"style:{self.name}"


# ----------------------------------------------------------------------------
# rendering


_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
_PIX = np.stack([_xx.ravel() + 0.5, _yy.ravel() + 0.5], axis=1)


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(p - proj, axis=1)


def render_glyph(label: int, rng: np.random.Generator) -> np.ndarray:
    """Render one (H, W) grayscale glyph of class ``label`` with pose jitter."""
    angle = np.deg2rad(rng.uniform(-12, 12))
    radius = (IMAGE_SIZE / 2 - 3) * rng.uniform(0.85, 1.05)
    center = IMAGE_SIZE / 2 + rng.uniform(-1.5, 1.5, size=2)
    thickness = rng.uniform(1.3, 2.3)
    ink = rng.uniform(0.85, 1.0)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    dist = np.full(len(_PIX), np.inf)
    for a, b in GLYPHS[label % len(GLYPHS)]:
        pa = center + radius * (rot @ np.asarray(a))
        pb = center + radius * (rot @ np.asarray(b))
        dist = np.minimum(dist, _segment_distance(_PIX, pa, pb))
    img = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0) * ink
    return img.reshape(IMAGE_SIZE, IMAGE_SIZE)


def gen_source(seed: int, n: int, num_classes: int = 10) -> Dataset:
    """n balanced glyph images (3x24x24 in [0, 1]); pure function of (seed, n, K)."""
    if num_classes < 2 or num_classes > len(GLYPHS):
        raise ValueError(f"num_classes must be in 2..{len(GLYPHS)}")
    if n < num_classes:
        raise ValueError(f"need n >= K, got n={n}, K={num_classes}")
    order = np.random.default_rng([seed, 0]).permutation(n)
    labels = (np.arange(n) % num_classes)[order]
    images = np.empty((n, CHANNELS, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        images[i] = render_glyph(int(labels[i]), rng)[None]
    manifest = {"domain": "source", "seed": seed, "n": n, "num_classes": num_classes,
                "generator": "glyph-v1"}
    return Dataset(images, labels, manifest)


# ----------------------------------------------------------------------------
# corruptions and styles


def _box3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[2:]
    acc = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            acc += p[:, :, i:i + h, j:j + w]
    return acc / 9.0


def _max3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[2:]
    out = x.copy()
    for i in range(3):
        for j in range(3):
            np.maximum(out, p[:, :, i:i + h, j:j + w], out=out)
    return out


def apply_corruption(images: np.ndarray, ctype: str, level: int, seed: int = 0) -> np.ndarray:
    """Deterministic corruption of a (N, C, H, W) batch; level 0 is the identity.

    Additive Gaussian noise is left unclipped so its empirical std equals
    the table value; every other corruption stays inside [0, 1].
    """
    if ctype not in CORRUPTION_TYPES:
        raise ValueError(f"unknown corruption type {ctype!r}")
    if not 0 <= level <= 5:
        raise ValueError(f"corruption level must be in 0..5, got {level}")
    x = np.asarray(images, dtype=np.float32)
    if level == 0:
        return x.copy()
    rng = np.random.default_rng([seed, CORRUPTION_TYPES.index(ctype), level])
    s = CORRUPTION_TABLE[ctype][level - 1]
    n, c, h, w = x.shape
    if ctype == "gaussian_noise":
        out = x + rng.normal(0.0, s, size=(n, 1, h, w))
    elif ctype == "impulse_noise":
        u = rng.random((n, 1, h, w))
        out = np.where(u < s / 2, 0.0, np.where(u > 1 - s / 2, 1.0, x))
    elif ctype == "box_blur":
        out = x.astype(np.float64)
        for _ in range(s):
            out = _box3(out)
    elif ctype == "contrast":
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - m) * s + m
    elif ctype == "brightness":
        out = np.clip(x + s, 0.0, 1.0)
    else:  # pixelate
        hb, wb = -(-h // s), -(-w // s)
        p = np.pad(x, ((0, 0), (0, 0), (0, hb * s - h), (0, wb * s - w)), mode="edge")
        blocks = p.reshape(n, c, hb, s, wb, s).mean(axis=(3, 5))
        out = np.repeat(np.repeat(blocks, s, axis=2), s, axis=3)[:, :, :h, :w]
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_style(images: np.ndarray, name: str, seed: int = 0) -> np.ndarray:
    if name not in STYLE_NAMES:
        raise ValueError(f"unknown style {name!r}")
    x = np.asarray(images, dtype=np.float32)
    if name == "invert":
        return (1.0 - x).astype(np.float32)
    if name == "dilate":
        return _max3(x.astype(np.float32))
    n, c, h, w = x.shape
    rng = np.random.default_rng([seed, 101])
    tex = rng.random((n, 1, h, w))
    tex = _box3(_box3(tex))
    lo = tex.min(axis=(2, 3), keepdims=True)
    hi = tex.max(axis=(2, 3), keepdims=True)
    tex = 0.6 * (tex - lo) / np.maximum(hi - lo, 1e-12)
    return np.clip(x + (1.0 - x) * tex, 0.0, 1.0).astype(np.float32)


def make_domain(spec: DomainSpec, base: Dataset) -> Dataset:
    """Apply ``spec`` to an already generated clean dataset."""
    if spec.kind == "source":
        images = base.images.copy()
    elif spec.kind == "corruption":
        images = apply_corruption(base.images, spec.name, spec.level, spec.seed)
    else:
        images = apply_style(base.images, spec.name, spec.seed)
    manifest = dict(base.manifest)
    manifest.update({"domain": str(spec), "domain_seed": spec.seed})
    return Dataset(images, base.labels.copy(), manifest)


def generate(spec: DomainSpec, n: int, num_classes: int = 10, base_seed: int | None = None) -> Dataset:
    """Generate clean glyphs with ``base_seed`` (defaults to spec.seed) and apply the spec."""
    base = gen_source(spec.seed if base_seed is None else base_seed, n, num_classes)
    return make_domain(spec, base)


# ----------------------------------------------------------------------------
# file format

DATASET_MAGIC = b"NSDS"
DATASET_VERSION = 1


def write_dataset(ds: Dataset, path) -> None:
    head = json.dumps(ds.manifest, sort_keys=True).encode("utf-8")
    n, c, h, w = ds.images.shape
    payload = b"".join([
        DATASET_MAGIC,
        struct.pack("<II", DATASET_VERSION, len(head)), head,
        struct.pack("<IIII", n, c, h, w),
        np.ascontiguousarray(ds.images, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
    ])
    Path(path).write_bytes(payload)


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: malformed header (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    pos = 12
    if pos + hlen + 16 > len(buf):
        raise DatasetFormatError(f"{path}: truncated header")
    try:
        manifest = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: malformed manifest: {exc}") from exc
    pos += hlen
    n, c, h, w = struct.unpack_from("<IIII", buf, pos)
    pos += 16
    n_img = n * c * h * w
    expected = pos + 4 * n_img + 4 * n
    if len(buf) != expected:
        raise DatasetFormatError(
            f"{path}: count mismatch, header implies {expected} bytes but file has {len(buf)}")
    images = np.frombuffer(buf, dtype="<f4", count=n_img, offset=pos).astype(np.float32).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=pos + 4 * n_img).astype(np.int64)
    return Dataset(images, labels, manifest)
