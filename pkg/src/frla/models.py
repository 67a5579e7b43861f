"""Target model, frozen mock vision-language teacher, and their checkpoints.

Both networks share the same skeleton: a stack of strided valid
convolutions (each followed by ReLU) yields a B×H×W×D feature map, a linear
map takes every patch to a common embedding space, and class scores are
similarities against a K×D class matrix.  For the teacher that matrix is a
fixed set of unit-norm "text" embeddings and features are L2-normalised by
the pooled feature norm; the target model uses its own classifier weights
and no normalisation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, DegenerateInputError, ShapeError
from .tensor import Tensor

FORMAT_VERSION = 1
MAGIC = b"FRLA"


@dataclass(frozen=True)
class Architecture:
    """Geometry of a conv-stack classifier.

    ``layers`` lists ``(out_channels, kernel, stride)`` per conv layer.  The
    default patchifies a 32×32 image into a 4×4 grid whose cells cover
    disjoint 8×8 pixel blocks.
    """

    kind: str = "target"
    image_size: int = 32
    channels: int = 3
    layers: tuple = ((16, 4, 4), (32, 2, 2), (32, 1, 1))
    embed_dim: int = 16
    num_classes: int = 4
    logit_scale: float = 1.0
    bottleneck_relu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        if self.kind not in ("target", "vil"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        self.grid_size  # validates geometry

    @property
    def grid_size(self) -> int:
        s = self.image_size
        for _, k, stride in self.layers:
            if k > s:
                raise ShapeError(f"kernel {k} larger than {s}×{s} input")
            s = (s - k) // stride + 1
        return s

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0]

    def to_json(self) -> str:
        d = asdict(self)
        d["layers"] = [list(l) for l in self.layers]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        d = json.loads(text)
        d["layers"] = tuple(tuple(l) for l in d["layers"])
        return cls(**d)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _conv_params(rng, arch: Architecture, prefix: str) -> dict:
    params = {}
    c_in = arch.channels
    for i, (c_out, k, _) in enumerate(arch.layers):
        params[f"{prefix}.conv{i}.weight"] = _he(rng, (c_out, c_in, k, k), c_in * k * k)
        params[f"{prefix}.conv{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    return params


class _Network:
    """Named parameter container with a fixed architecture."""

    arch: Architecture
    params: dict

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ShapeError(f"missing parameter {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def copy(self):
        other = type(self).__new__(type(self))
        other.arch = self.arch
        other.params = {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()}
        return other

    def _check_batch(self, batch) -> Tensor:
        batch = T.as_tensor(batch)
        a = self.arch
        if batch.ndim != 4 or batch.shape[1:] != (a.channels, a.image_size, a.image_size):
            raise ShapeError(
                f"batch shape {batch.shape} does not match B×{a.channels}×{a.image_size}×{a.image_size}"
            )
        return batch

    def features(self, batch, prefix: str) -> Tensor:
        """Conv stack output as B×H×W×D."""
        x = self._check_batch(batch) - 0.5  # pixels arrive in [0, 1]
        for i, (_, _, stride) in enumerate(self.arch.layers):
            w = self.params[f"{prefix}.conv{i}.weight"]
            b = self.params[f"{prefix}.conv{i}.bias"]
            x = T.conv2d(x, w, stride)
            x = T.relu(x + T.broadcast_to(b.reshape(1, -1, 1, 1), x.shape))
        return x.permute(0, 2, 3, 1)


class TargetModel(_Network):
    """Adapting student: conv backbone, linear bottleneck, linear classifier."""

    def __init__(self, arch: Architecture | None = None, seed: int = 0):
        arch = arch or Architecture(kind="target")
        if arch.kind != "target":
            raise ValueError("TargetModel needs a target architecture")
        self.arch = arch
        rng = np.random.default_rng(seed)
        raw = _conv_params(rng, arch, "backbone")
        raw["bottleneck.weight"] = rng.standard_normal((arch.embed_dim, arch.feature_dim)) / np.sqrt(arch.feature_dim)
        raw["classifier.weight"] = rng.standard_normal((arch.num_classes, arch.embed_dim)) / np.sqrt(arch.embed_dim)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


class MockViL(_Network):
    """Frozen teacher: vision encoder, projection, unit-norm text matrix C."""

    def __init__(self, arch: Architecture | None = None, seed: int = 0, text_matrix=None):
        arch = arch or Architecture(kind="vil", logit_scale=10.0)
        if arch.kind != "vil":
            raise ValueError("MockViL needs a vil architecture")
        self.arch = arch
        rng = np.random.default_rng(seed)
        raw = _conv_params(rng, arch, "encoder")
        raw["projection.weight"] = rng.standard_normal((arch.embed_dim, arch.feature_dim)) / np.sqrt(arch.feature_dim)
        raw["projection.bias"] = np.zeros(arch.embed_dim)
        if text_matrix is None:
            text_matrix = rng.standard_normal((arch.num_classes, arch.embed_dim))
            if arch.num_classes <= arch.embed_dim:
                # well-separated class prompts: orthonormal rows
                text_matrix = np.linalg.qr(text_matrix.T)[0].T
        text_matrix = np.asarray(text_matrix, dtype=np.float64)
        if text_matrix.shape != (arch.num_classes, arch.embed_dim):
            raise ShapeError(f"text matrix must be {arch.num_classes}×{arch.embed_dim}")
        raw["text_matrix"] = text_matrix / np.linalg.norm(text_matrix, axis=1, keepdims=True)
        self.params = {k: Tensor(v) for k, v in raw.items()}

    def set_trainable(self, flag: bool) -> None:
        """Toggle gradients on encoder and projection; C always stays fixed."""
        for name, p in self.params.items():
            p.requires_grad = bool(flag) and name != "text_matrix"
            p.grad = None

    def freeze(self) -> None:
        self.set_trainable(False)


# heads ------------------------------------------------------------------

def project_patches(features: Tensor, weight: Tensor, relu: bool = False, bias: Tensor | None = None) -> Tensor:
    """Apply a D×D_in linear (optionally affine) map to every patch of a B×H×W×D_in map."""
    B, H, W, Din = features.shape
    out = T.matmul(features.reshape(B * H * W, Din), weight.T)
    if bias is not None:
        out = out + T.broadcast_to(bias.reshape(1, -1), out.shape)
    if relu:
        out = T.relu(out)
    return out.reshape(B, H, W, weight.shape[0])


def pooled_norm(projected: Tensor) -> Tensor:
    """Per-sample Euclidean norm of the spatially pooled projected feature, shape B."""
    pooled = T.global_avg_pool(projected)
    sq = (pooled * pooled).sum(axis=1)
    if np.any(sq.data <= 0.0):
        bad = np.flatnonzero(sq.data <= 0.0).tolist()
        raise DegenerateInputError(f"pooled feature has zero norm for samples {bad}")
    return T.sqrt(sq)


def patch_probabilities(projected: Tensor, class_matrix: Tensor, logit_scale: float,
                        norm: Tensor | None = None) -> Tensor:
    """Softmax over K of per-patch similarities to the class matrix.

    ``norm`` (shape B) divides every patch of a sample by one scalar; pass
    None for the un-normalised target-model variant.
    """
    B, H, W, D = projected.shape
    x = projected
    if norm is not None:
        x = x / T.broadcast_to(norm.reshape(B, 1, 1, 1), x.shape)
    logits = T.matmul(x.reshape(B * H * W, D), class_matrix.T) * float(logit_scale)
    return T.softmax_axis(logits, -1).reshape(B, H, W, class_matrix.shape[0])


def _image_probabilities(pooled: Tensor, class_matrix: Tensor, logit_scale: float) -> Tensor:
    return T.softmax_axis(T.matmul(pooled, class_matrix.T) * float(logit_scale), -1)


def target_heads(model: TargetModel, batch) -> tuple[Tensor, Tensor]:
    """(image probs B×K, patch probs B×H×W×K) from one backbone pass."""
    proj = project_patches(model.features(batch, "backbone"), model.params["bottleneck.weight"],
                           relu=model.arch.bottleneck_relu)
    cls = model.params["classifier.weight"]
    image = _image_probabilities(T.global_avg_pool(proj), cls, model.arch.logit_scale)
    patches = patch_probabilities(proj, cls, model.arch.logit_scale)
    return image, patches


def target_forward_image(model: TargetModel, batch) -> Tensor:
    proj = project_patches(model.features(batch, "backbone"), model.params["bottleneck.weight"],
                           relu=model.arch.bottleneck_relu)
    return _image_probabilities(T.global_avg_pool(proj), model.params["classifier.weight"],
                                model.arch.logit_scale)


def target_forward_patches(model: TargetModel, batch) -> Tensor:
    return target_heads(model, batch)[1]


def vil_projected(vil: MockViL, batch) -> Tensor:
    return project_patches(vil.features(batch, "encoder"), vil.params["projection.weight"],
                           bias=vil.params["projection.bias"])


def vil_heads(vil: MockViL, batch) -> tuple[Tensor, Tensor]:
    proj = vil_projected(vil, batch)
    pooled = T.global_avg_pool(proj)
    norm = pooled_norm(proj)
    C = vil.params["text_matrix"]
    B = pooled.shape[0]
    unit = pooled / T.broadcast_to(norm.reshape(B, 1), pooled.shape)
    image = _image_probabilities(unit, C, vil.arch.logit_scale)
    patches = patch_probabilities(proj, C, vil.arch.logit_scale, norm)
    return image, patches


def vil_forward_image(vil: MockViL, batch) -> Tensor:
    return vil_heads(vil, batch)[0]


def vil_forward_patches(vil: MockViL, batch) -> Tensor:
    return vil_heads(vil, batch)[1]


# checkpoints ------------------------------------------------------------

def save_checkpoint(model: _Network, path) -> None:
    """Write the little-endian binary checkpoint format."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    desc = model.arch.to_json().encode("utf-8")
    chunks += [struct.pack("<I", len(desc)), desc, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<I", p.ndim)]
        chunks += [struct.pack(f"<{p.ndim}I", *p.shape), p.data.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: corrupt or truncated file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, into: _Network | None = None) -> _Network:
    """Read a checkpoint into a fresh model, or into ``into`` after shape checks."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(buf, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not an FRLA checkpoint")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        arch = Architecture.from_json(r.take(r.u32("descriptor length"), "descriptor").decode("utf-8"))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad architecture descriptor ({exc})") from None
    state = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8", errors="replace")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(r.take(8 * n, f"values of {name}"), dtype="<f8")
        state[name] = vals.astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: corrupt file, {len(buf) - r.pos} trailing bytes")

    if into is not None:
        for name, p in into.params.items():
            if name not in state:
                raise ShapeError(f"parameter {name} missing from {path}")
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
        into.load_state_dict(state)
        return into

    model = TargetModel(arch) if arch.kind == "target" else MockViL(arch)
    if set(state) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the {arch.kind} architecture")
    model.load_state_dict(state)
    if arch.kind == "vil":
        model.freeze()
    return model
