"""Model definition: configuration, weights, folding, and file formats.

The network is a patch-embedding mixer in which every normalization is
a per-element affine at inference time and the only nonlinearity is an
elementwise square. Raw weights keep normalization as (mean, var,
gamma) statistics; ``fold_model`` collapses each normalization site
into a (scale, bias) pair of shape (embed_dim, n, n) with
scale = gamma / sqrt(var + eps) and bias = -mean * scale, broadcasting
the per-position statistics over channels and the per-channel gamma
over positions. ``quantize_model`` then encodes the folded constants
into the fixed-point ring.
"""

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from xpi import ring
from xpi.errors import FormatError
from xpi.ring import RingTensor
from xpi.sharing import RandomSource

NORM_EPS = 1e-5

WEIGHTS_MAGIC = b"XMW1"
VECTORS_MAGIC = b"XMV1"
CORR_MAGIC = b"XPC1"
FORMAT_VERSION = 1

_DTYPE_F32 = 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything else is derived."""

    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 256
    channel_mix_dim: int = 256
    depth: int = 16
    num_classes: int = 100

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive int, got {v!r}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not a multiple of "
                f"patch_size {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        """Patches per side (n); the token count is n*n."""
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def astuple(self) -> tuple:
        return (
            self.image_size,
            self.patch_size,
            self.embed_dim,
            self.channel_mix_dim,
            self.depth,
            self.num_classes,
        )


PRESETS = {
    "toy": ModelConfig(16, 4, 32, 32, 2, 10),
    "m16": ModelConfig(32, 4, 256, 256, 16, 100),
    "m24": ModelConfig(32, 4, 256, 256, 24, 100),
    "t36": ModelConfig(32, 4, 384, 384, 36, 100),
}


def _expected_shapes(cfg: ModelConfig) -> dict:
    n, d, cm = cfg.grid, cfg.embed_dim, cfg.channel_mix_dim
    shapes = {
        "patch_embed.weight": (d, cfg.patch_dim),
        "patch_embed.bias": (d,),
        "head.weight": (cfg.num_classes, d),
        "head.bias": (cfg.num_classes,),
    }
    for i in range(cfg.depth):
        p = f"layers.{i}"
        shapes[f"{p}.pre_norm.mean"] = (n, n)
        shapes[f"{p}.pre_norm.var"] = (n, n)
        shapes[f"{p}.conv.weight"] = (d, 3, 3)
        shapes[f"{p}.conv.bias"] = (d,)
        shapes[f"{p}.post_norm1.mean"] = (n, n)
        shapes[f"{p}.post_norm1.var"] = (n, n)
        shapes[f"{p}.post_norm1.gamma"] = (d,)
        shapes[f"{p}.mix_in.weight"] = (cm, d)
        shapes[f"{p}.mix_in.bias"] = (cm,)
        shapes[f"{p}.mix_out.weight"] = (d, cm)
        shapes[f"{p}.mix_out.bias"] = (d,)
        shapes[f"{p}.post_norm2.mean"] = (n, n)
        shapes[f"{p}.post_norm2.var"] = (n, n)
        shapes[f"{p}.post_norm2.gamma"] = (d,)
    return shapes


@dataclass
class ModelWeights:
    """Raw float32 weights plus normalization statistics."""

    cfg: ModelConfig
    tensors: dict = field(default_factory=dict)

    def validate(self) -> None:
        expected = _expected_shapes(self.cfg)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise FormatError(f"missing tensor {name!r}")
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise FormatError(
                    f"tensor {name!r} has shape {tuple(t.shape)}, expected {shape}"
                )
            if t.dtype != np.float32:
                raise FormatError(f"tensor {name!r} has dtype {t.dtype}, expected float32")
            if not np.isfinite(t).all():
                raise FormatError(f"tensor {name!r} contains non-finite values")
        for name in self.tensors:
            if name not in expected:
                raise FormatError(f"unexpected tensor {name!r}")
        for i in range(self.cfg.depth):
            for site in ("pre_norm", "post_norm1", "post_norm2"):
                var = self.tensors[f"layers.{i}.{site}.var"]
                if (var < 0).any():
                    raise FormatError(f"layers.{i}.{site}.var has negative entries")


def param_count(cfg: ModelConfig) -> int:
    """Learnable parameters (normalization running stats excluded)."""
    n, d, cm, p2 = cfg.grid, cfg.embed_dim, cfg.channel_mix_dim, cfg.patch_dim
    embed = p2 * d + d
    per_layer = (
        d * 9 + d          # depthwise conv weight + bias
        + d + d            # two post-norm gammas
        + d * cm + cm      # channel mix in
        + cm * d + d       # channel mix out
    )
    head = d * cfg.num_classes + cfg.num_classes
    return embed + cfg.depth * per_layer + head


def serialize_weights(w: ModelWeights) -> bytes:
    w.validate()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<6I", *w.cfg.astuple()))
    names = sorted(w.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = np.ascontiguousarray(w.tensors[name], dtype=np.float32)
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(struct.pack("<B", _DTYPE_F32))
        buf.write(t.astype("<f4").tobytes())
    return buf.getvalue()


def save_weights(w: ModelWeights, path: str) -> None:
    data = serialize_weights(w)
    with open(path, "wb") as f:
        f.write(data)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def load_weights(path: str) -> ModelWeights:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported weights version {version}")
        fields = struct.unpack("<6I", _read_exact(f, 24, "config"))
        try:
            cfg = ModelConfig(*fields)
        except ValueError as exc:
            raise FormatError(f"invalid config in weights file: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "dims"))
            (dtype_tag,) = struct.unpack("<B", _read_exact(f, 1, "dtype"))
            if dtype_tag != _DTYPE_F32:
                raise FormatError(f"tensor {name!r} has unsupported dtype tag {dtype_tag}")
            numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 4 * numel, f"tensor {name!r} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if f.read(1):
            raise FormatError("trailing bytes after the last tensor")
    w = ModelWeights(cfg, tensors)
    w.validate()
    return w


def digest_weights(w: ModelWeights) -> bytes:
    return hashlib.sha256(serialize_weights(w)).digest()


def save_vectors(path: str, images: np.ndarray, logits: np.ndarray) -> None:
    """Write reference (image, logits) pairs for cross-checking."""
    images = np.ascontiguousarray(images, dtype="<f4")
    logits = np.ascontiguousarray(logits, dtype="<f4")
    if images.ndim < 2 or logits.ndim != 2 or images.shape[0] != logits.shape[0]:
        raise ValueError(
            f"need matching leading dims, got {images.shape} and {logits.shape}"
        )
    count = images.shape[0]
    image_elems = int(np.prod(images.shape[1:], dtype=np.int64))
    logit_elems = logits.shape[1]
    with open(path, "wb") as f:
        f.write(VECTORS_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<3I", count, image_elems, logit_elems))
        for i in range(count):
            f.write(images[i].tobytes())
            f.write(logits[i].tobytes())


def load_vectors(path: str) -> tuple:
    """Read (images, logits); images come back flat per vector."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != VECTORS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {VECTORS_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported vectors version {version}")
        count, image_elems, logit_elems = struct.unpack(
            "<3I", _read_exact(f, 12, "vector counts")
        )
        images = np.empty((count, image_elems), dtype=np.float32)
        logits = np.empty((count, logit_elems), dtype=np.float32)
        for i in range(count):
            images[i] = np.frombuffer(
                _read_exact(f, 4 * image_elems, f"vector {i} image"), dtype="<f4"
            )
            logits[i] = np.frombuffer(
                _read_exact(f, 4 * logit_elems, f"vector {i} logits"), dtype="<f4"
            )
        if f.read(1):
            raise FormatError("trailing bytes after the last vector")
    return images, logits


@dataclass(frozen=True)
class NormConstants:
    """A folded normalization site: y = x * scale + bias, per element."""

    scale: np.ndarray
    bias: np.ndarray


def fold_norm(mean: np.ndarray, var: np.ndarray, gamma, eps: float = NORM_EPS) -> NormConstants:
    """Collapse (mean, var, gamma) statistics into one affine map.

    mean/var are per position (n, n); gamma is per channel (d,) or None
    for an affine-free site. The result broadcasts to (d, n, n).
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != var.shape or mean.ndim != 2:
        raise ValueError(f"mean/var must be matching 2-d arrays, got {mean.shape}, {var.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not (np.isfinite(mean).all() and np.isfinite(var).all()):
        raise ValueError("normalization statistics must be finite")
    if (var < 0).any():
        raise ValueError("variance has negative entries")
    inv = 1.0 / np.sqrt(var + eps)
    if gamma is None:
        gamma = np.array([1.0])
        d = 1
    else:
        gamma = np.asarray(gamma, dtype=np.float64)
        if gamma.ndim != 1:
            raise ValueError(f"gamma must be 1-d, got shape {gamma.shape}")
        d = gamma.shape[0]
    scale = gamma[:, None, None] * inv[None, :, :]
    bias = -mean[None, :, :] * scale
    if d == 1:
        scale = np.broadcast_to(scale, (1,) + mean.shape)
    return NormConstants(np.ascontiguousarray(scale), np.ascontiguousarray(bias))


@dataclass
class FoldedModel:
    """Inference-ready float64 parameters, keyed by pipeline name.

    Matmul weights are stored input-major, i.e. (in, out), so a batch
    of row vectors multiplies on the left. Norm sites appear as
    ``<site>.scale`` / ``<site>.bias`` of shape (d, n, n).
    """

    cfg: ModelConfig
    params: dict


def fold_model(w: ModelWeights) -> FoldedModel:
    w.validate()
    cfg = w.cfg
    t = w.tensors
    d = cfg.embed_dim
    params = {
        "patch_embed.weight": t["patch_embed.weight"].astype(np.float64).T.copy(),
        "patch_embed.bias": t["patch_embed.bias"].astype(np.float64),
        "head.weight": t["head.weight"].astype(np.float64).T.copy(),
        "head.bias": t["head.bias"].astype(np.float64),
    }
    for i in range(cfg.depth):
        p = f"layers.{i}"
        pre = fold_norm(t[f"{p}.pre_norm.mean"], t[f"{p}.pre_norm.var"], None)
        params[f"{p}.pre_norm.scale"] = np.ascontiguousarray(
            np.broadcast_to(pre.scale, (d,) + pre.scale.shape[1:])
        )
        params[f"{p}.pre_norm.bias"] = np.ascontiguousarray(
            np.broadcast_to(pre.bias, (d,) + pre.bias.shape[1:])
        )
        for site in ("post_norm1", "post_norm2"):
            nc = fold_norm(
                t[f"{p}.{site}.mean"], t[f"{p}.{site}.var"], t[f"{p}.{site}.gamma"]
            )
            params[f"{p}.{site}.scale"] = nc.scale
            params[f"{p}.{site}.bias"] = nc.bias
        params[f"{p}.conv.weight"] = t[f"{p}.conv.weight"].astype(np.float64)
        # shaped to broadcast over the (batch, d, n, n) grid
        params[f"{p}.conv.bias"] = t[f"{p}.conv.bias"].astype(np.float64).reshape(d, 1, 1)
        params[f"{p}.mix_in.weight"] = t[f"{p}.mix_in.weight"].astype(np.float64).T.copy()
        params[f"{p}.mix_in.bias"] = t[f"{p}.mix_in.bias"].astype(np.float64)
        params[f"{p}.mix_out.weight"] = t[f"{p}.mix_out.weight"].astype(np.float64).T.copy()
        params[f"{p}.mix_out.bias"] = t[f"{p}.mix_out.bias"].astype(np.float64)
    return FoldedModel(cfg, params)


@dataclass
class QuantizedModel:
    """Folded parameters encoded into the fixed-point ring at one scale."""

    cfg: ModelConfig
    frac_bits: int
    params: dict


def quantize_model(folded: FoldedModel, frac_bits: int) -> QuantizedModel:
    params = {name: ring.encode_fixed(arr, frac_bits) for name, arr in folded.params.items()}
    return QuantizedModel(folded.cfg, frac_bits, params)


def random_model(cfg: ModelConfig, seed: int, calib_batch: int = 64) -> ModelWeights:
    """Generate weights with calibrated normalization statistics.

    Weights are fan-in-scaled Gaussians. The normalization statistics
    are taken from one forward pass over a batch of standard-normal
    images, computing each site's per-position batch statistics in
    order, exactly as training-time batch normalization would. Without
    this step the square activations compound layer over layer and blow
    past any fixed-point range.
    """
    rs = RandomSource.deterministic(seed)
    n, d, cm, p2 = cfg.grid, cfg.embed_dim, cfg.channel_mix_dim, cfg.patch_dim
    t = {}
    t["patch_embed.weight"] = rs.normal((d, p2), p2 ** -0.5).astype(np.float32)
    t["patch_embed.bias"] = rs.normal((d,), 0.1).astype(np.float32)
    for i in range(cfg.depth):
        p = f"layers.{i}"
        t[f"{p}.conv.weight"] = rs.normal((d, 3, 3), 1.0 / 3.0).astype(np.float32)
        t[f"{p}.conv.bias"] = rs.normal((d,), 0.1).astype(np.float32)
        t[f"{p}.mix_in.weight"] = rs.normal((cm, d), d ** -0.5).astype(np.float32)
        t[f"{p}.mix_in.bias"] = rs.normal((cm,), 0.1).astype(np.float32)
        t[f"{p}.mix_out.weight"] = rs.normal((d, cm), cm ** -0.5).astype(np.float32)
        t[f"{p}.mix_out.bias"] = rs.normal((d,), 0.1).astype(np.float32)
        for site in ("post_norm1", "post_norm2"):
            t[f"{p}.{site}.gamma"] = (1.0 + rs.normal((d,), 0.1)).astype(np.float32)
    t["head.weight"] = rs.normal((cfg.num_classes, d), d ** -0.5).astype(np.float32)
    t["head.bias"] = rs.normal((cfg.num_classes,), 0.1).astype(np.float32)

    # Calibration pass: batch statistics per spatial position, pooled
    # over batch and channel, recorded then immediately applied.
    def observe(p_name: str, x: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        t[f"{p_name}.mean"] = mean.astype(np.float32)
        t[f"{p_name}.var"] = var.astype(np.float32)
        return (x - mean[None, None]) / np.sqrt(var[None, None] + NORM_EPS)

    images = rs.normal((calib_batch, 3, cfg.image_size, cfg.image_size))
    x = images.reshape(calib_batch, 3, n, cfg.patch_size, n, cfg.patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(calib_batch * n * n, p2)
    x = x @ t["patch_embed.weight"].astype(np.float64).T + t["patch_embed.bias"]
    x = x.reshape(calib_batch, n, n, d).transpose(0, 3, 1, 2)
    for i in range(cfg.depth):
        p = f"layers.{i}"
        u = observe(f"{p}.pre_norm", x)
        kern = t[f"{p}.conv.weight"].astype(np.float64)
        padded = np.zeros((calib_batch, d, n + 2, n + 2))
        padded[:, :, 1:-1, 1:-1] = u
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
        u = np.einsum("bcijkl,ckl->bcij", win, kern) + t[f"{p}.conv.bias"].astype(
            np.float64
        )[None, :, None, None]
        u = observe(f"{p}.post_norm1", u)
        u = u * t[f"{p}.post_norm1.gamma"].astype(np.float64)[None, :, None, None]
        u = u + x
        v = u.transpose(0, 2, 3, 1).reshape(calib_batch * n * n, d)
        v = v @ t[f"{p}.mix_in.weight"].astype(np.float64).T + t[f"{p}.mix_in.bias"]
        v = v * v
        v = v @ t[f"{p}.mix_out.weight"].astype(np.float64).T + t[f"{p}.mix_out.bias"]
        v = v.reshape(calib_batch, n, n, d).transpose(0, 3, 1, 2)
        v = observe(f"{p}.post_norm2", v)
        v = v * t[f"{p}.post_norm2.gamma"].astype(np.float64)[None, :, None, None]
        x = v + u
    w = ModelWeights(cfg, t)
    w.validate()
    return w
