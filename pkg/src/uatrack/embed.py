"""Point-cloud canonicalization and a PointNet-style embedding network.

The network is a shared per-point MLP (rectifier hidden layers, identity
output) followed by a coordinate-wise max over points; the max makes the
embedding invariant to point order. Gradients are exact reverse-mode and
hand-written (`backward`), which keeps training dependency-free and
bit-reproducible.

Checkpoint format: magic "UANN", uint32 layer count, then per layer
uint32 in, uint32 out, row-major float64 weights (out x in), float64
biases (out), all little-endian.
"""

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Box7, PointCloud
from .kalman import NumericalError

NORM_EPS = 1e-12
DEFAULT_WIDTHS = (3, 64, 64, 64)
DEFAULT_POINTS = 128

NET_MAGIC = b"UANN"


def canon_seed(cloud_ref: str, salt: int = 0) -> tuple[int, int]:
    """Stable resampling seed derived from a cloud ref, independent of the
    order in which detections are processed."""
    digest = hashlib.sha256(cloud_ref.encode("utf-8")).digest()
    return (int.from_bytes(digest[:8], "little"), salt)


@dataclass(frozen=True)
class CanonicalCloud:
    """Fixed-size crop of a cloud expressed in its box's local frame."""

    points: np.ndarray  # (n, 3) float64
    source: str
    empty: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"canonical points must be (n, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("canonical cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


def canonicalize(cloud: PointCloud, box: Box7, n: int, seed,
                 source: str = "") -> CanonicalCloud:
    """Crop a world-frame cloud to a box and resample to exactly n points.

    Points are translated by -center and rotated by -yaw about z, then kept
    if they fall inside the axis-aligned extents. More than n survivors are
    subsampled without replacement, fewer are resampled with replacement.
    A crop with zero survivors yields n copies of the origin, flagged empty.
    """
    if n < 1:
        raise ValueError(f"point count must be >= 1, got {n}")
    pts = cloud.points.astype(np.float64)
    d = pts - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # row-vector form of R(-yaw) @ (p - center)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    local = d @ rot
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
    mask = (np.abs(local) <= half).all(axis=1)
    inside = local[mask]
    count = inside.shape[0]
    if count == 0:
        return CanonicalCloud(points=np.zeros((n, 3)), source=source, empty=True)
    rng = np.random.default_rng(seed)
    if count > n:
        idx = rng.choice(count, size=n, replace=False)
    elif count < n:
        idx = rng.choice(count, size=n, replace=True)
    else:
        idx = np.arange(count)
    return CanonicalCloud(points=inside[idx], source=source, empty=False)


@dataclass(frozen=True)
class EmbedNet:
    """Per-point MLP + max pool. weights[k] has shape (out_k, in_k)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise ValueError("weights and biases must pair up, one per layer")
        prev = ws[0].shape[1]
        for w, b in zip(ws, bs):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            if w.shape[1] != prev:
                raise ValueError(f"layer input {w.shape[1]} != previous output {prev}")
            prev = w.shape[0]
        for a in ws + bs:
            a.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @classmethod
    def from_params(cls, params) -> "EmbedNet":
        return cls(weights=tuple(params[0::2]), biases=tuple(params[1::2]))

    @classmethod
    def random(cls, widths=DEFAULT_WIDTHS, seed=0) -> "EmbedNet":
        """He-initialized network with zero biases."""
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"need at least [in, out] positive widths, got {widths}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights=tuple(weights), biases=tuple(biases))


def _check_finite(net: EmbedNet) -> None:
    for a in net.params():
        if not np.isfinite(a).all():
            raise NumericalError("network parameters contain non-finite values")


def forward(net: EmbedNet, cloud: CanonicalCloud) -> np.ndarray:
    """Embed a canonical cloud: shared per-point MLP, then max over points."""
    _check_finite(net)
    x = cloud.points
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w.T + b
        if k < last:
            x = np.maximum(x, 0.0)
    return x.max(axis=0)


def backward(net: EmbedNet, cloud: CanonicalCloud, upstream) -> list[np.ndarray]:
    """Exact gradients of upstream . embedding w.r.t. every weight and bias.

    The max pool routes gradient to the arg-max point of each output
    coordinate (ties to the lowest point index). Returns arrays aligned with
    net.params().
    """
    upstream = np.asarray(upstream, dtype=np.float64).reshape(net.dim)
    acts = [cloud.points]
    pre = []
    last = len(net.weights) - 1
    x = cloud.points
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = x @ w.T + b
        pre.append(z)
        x = np.maximum(z, 0.0) if k < last else z
        acts.append(x)
    final = acts[-1]
    arg = final.argmax(axis=0)  # first max wins ties
    g = np.zeros_like(final)
    g[arg, np.arange(final.shape[1])] = upstream

    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    for k in range(last, -1, -1):
        gz = g if k == last else g * (pre[k] > 0)
        grads[2 * k] = gz.T @ acts[k]
        grads[2 * k + 1] = gz.sum(axis=0)
        g = gz @ net.weights[k]
    return grads


def cosine(e1, e2) -> float:
    """Cosine similarity in [-1, 1]; degenerate (near-zero) norms map to 0.

    The zero return on degenerate inputs keeps empty-crop embeddings from
    blowing up training or evaluation (see `degenerate`).
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1 = float(np.linalg.norm(e1))
    n2 = float(np.linalg.norm(e2))
    if n1 < NORM_EPS or n2 < NORM_EPS:
        return 0.0
    c = float(np.dot(e1, e2) / (n1 * n2))
    return min(1.0, max(-1.0, c))


def degenerate(e) -> bool:
    """True when an embedding's norm is too small for cosine to be defined."""
    return float(np.linalg.norm(np.asarray(e, dtype=np.float64))) < NORM_EPS


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: EmbedNet) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(struct.pack("<I", len(net.weights)))
        for w, b in zip(net.weights, net.biases):
            out_dim, in_dim = w.shape
            fh.write(struct.pack("<II", in_dim, out_dim))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> EmbedNet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != NET_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {NET_MAGIC!r}")
    (layers,) = struct.unpack_from("<I", raw, 4)
    off = 8
    weights, biases = [], []
    for _ in range(layers):
        in_dim, out_dim = struct.unpack_from("<II", raw, off)
        off += 8
        w = np.frombuffer(raw, dtype="<f8", count=in_dim * out_dim, offset=off)
        off += in_dim * out_dim * 8
        b = np.frombuffer(raw, dtype="<f8", count=out_dim, offset=off)
        off += out_dim * 8
        weights.append(w.reshape(out_dim, in_dim).copy())
        biases.append(b.copy())
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return EmbedNet(weights=tuple(weights), biases=tuple(biases))
