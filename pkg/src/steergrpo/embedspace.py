"""Unit-sphere embedding space used by the reward model.

A fixed affine map followed by renormalization stands in for a CLIP-style
encoder. The same map embeds prompts (through their target points) and
generated samples, so both live in one joint space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNIT_TOL = 1e-9


class DegenerateEmbeddingError(ValueError):
    pass


class IndistinguishableAnchorsError(ValueError):
    pass


class DegenerateSteerError(ValueError):
    pass


def normalize(
    v: np.ndarray, err: type[ValueError] = DegenerateEmbeddingError, tol: float = 1e-300
) -> np.ndarray:
    """Row-wise L2 normalization; rows with norm below ``tol`` raise ``err``."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < tol):
        raise err("cannot normalize a zero vector")
    return v / norms


@dataclass(frozen=True)
class SyntheticEncoder:
    """``encode(x) = normalize(W @ x + b)`` with ``W`` of shape ``(d, m)``."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError(f"W must be (d, m) and b (d,), got {W.shape} and {b.shape}")
        if W.shape[0] < 2:
            raise ValueError("embedding dimension must be >= 2")
        if np.linalg.matrix_rank(W) < min(W.shape):
            raise ValueError("W must have full rank")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def data_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def from_seed(cls, d: int = 8, m: int = 2, seed: int = 7, scale: float = 2.0) -> "SyntheticEncoder":
        """Random orthonormal frame: ``W = Q[:, :m] / scale``, ``b = Q[:, m]``.

        With ``b`` orthogonal to the columns of ``W`` the map is a rotated
        gnomonic projection: a point at distance ``r`` from the origin lands
        at angle ``atan(r / scale)`` from the pole ``b``.
        """
        if d < m + 1:
            raise ValueError(f"need d >= m + 1 for an offset direction, got d={d}, m={m}")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((d, m + 1)))
        return cls(q[:, :m] / scale, q[:, m].copy())

    def encode(self, point: np.ndarray) -> np.ndarray:
        """Embed one point ``(m,)`` or a batch ``(N, m)`` onto the unit sphere."""
        x = np.asarray(point, dtype=np.float64)
        if x.shape[-1] != self.data_dim:
            raise ValueError(f"point has dimension {x.shape[-1]}, encoder expects {self.data_dim}")
        return normalize(x @ self.W.T + self.b)


def encode(enc: SyntheticEncoder, point: np.ndarray) -> np.ndarray:
    return enc.encode(point)


@dataclass(frozen=True)
class AnchorSet:
    """Safe and unsafe anchor points in prompt (data) space."""

    safe: np.ndarray
    unsafe: np.ndarray

    def __post_init__(self) -> None:
        safe = np.atleast_2d(np.asarray(self.safe, dtype=np.float64))
        unsafe = np.atleast_2d(np.asarray(self.unsafe, dtype=np.float64))
        if safe.size == 0 or unsafe.size == 0:
            raise ValueError("anchor lists must be nonempty")
        if safe.shape[1] != unsafe.shape[1]:
            raise ValueError("safe and unsafe anchors must share a dimension")
        object.__setattr__(self, "safe", safe)
        object.__setattr__(self, "unsafe", unsafe)

    def swapped(self) -> "AnchorSet":
        return AnchorSet(self.unsafe, self.safe)


@dataclass(frozen=True)
class SafetyDirection:
    """Unit vector pointing from the unsafe anchor mean toward the safe one."""

    vector: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise ValueError("safety direction must be unit norm")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


def build_safety_direction(enc: SyntheticEncoder, anchors: AnchorSet) -> SafetyDirection:
    diff = enc.encode(anchors.safe).mean(axis=0) - enc.encode(anchors.unsafe).mean(axis=0)
    norm = np.linalg.norm(diff)
    if norm < 1e-12:
        raise IndistinguishableAnchorsError(f"anchor means coincide (|diff| = {norm:.3g})")
    return SafetyDirection(diff / norm)


def text_safety_score(z: np.ndarray, v: SafetyDirection) -> float | np.ndarray:
    """Cosine of a prompt embedding with the safety direction; positive means safe."""
    s = np.asarray(z) @ v.vector
    return float(s) if np.ndim(s) == 0 else s


def steer(z: np.ndarray, v: SafetyDirection, alpha: float) -> np.ndarray:
    """``normalize(z + alpha * v)``."""
    if alpha < 0:
        raise ValueError("steering strength must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    if alpha == 0:
        return z.copy()
    return normalize(z + alpha * v.vector, err=DegenerateSteerError, tol=1e-12)


def load_points(path: str | Path) -> np.ndarray:
    """Read a point table: one point per line, comma-separated floats.

    Blank lines and anything after ``#`` are ignored. All rows must have
    the same number of columns.
    """
    rows: list[list[float]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad number in {raw!r}") from exc
        if rows and len(row) != len(rows[0]):
            raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(row)}")
        rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def format_points(points: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.atleast_2d(points))


def load_anchor_set(safe_path: str | Path, unsafe_path: str | Path) -> AnchorSet:
    return AnchorSet(load_points(safe_path), load_points(unsafe_path))
