"""The multimodal state: per-node irreps features plus a 3D coordinate.

A TensorCloud with axpy/dot is an inner-product space; all transport
arithmetic (interpolation, losses, sampler updates) is expressed through
these two operations so that feature and coordinate components are
always treated together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .irreps import IrrepsSpec, rotate_features


@dataclass(frozen=True)
class NoiseScales:
    """Variances of the Gaussian latent draws, split by modality."""

    var_features: float = 1.0
    var_positions: float = 3.0

    def __post_init__(self):
        if self.var_features <= 0 or self.var_positions <= 0:
            raise ValueError("noise variances must be positive")


@dataclass
class TensorCloud:
    spec: IrrepsSpec
    features: dict[int, np.ndarray]  # degree -> (N, H_l, 2l+1)
    positions: np.ndarray  # (N, 3)
    mask: dict[int, np.ndarray] | None = field(default=None)  # degree -> (N, H_l) bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        n = self.positions.shape[0]
        feats = {}
        for l, h in self.spec.entries:
            arr = np.asarray(self.features[l], dtype=np.float64)
            if arr.shape != (n, h, 2 * l + 1):
                raise ValueError(
                    f"degree {l} features must have shape {(n, h, 2 * l + 1)}, got {arr.shape}"
                )
            feats[l] = arr
        if set(self.features) != set(dict(self.spec.entries)):
            raise ValueError("feature degrees do not match the spec")
        self.features = feats
        if self.mask is not None:
            clean = {}
            for l, h in self.spec.entries:
                m = np.asarray(self.mask[l], dtype=bool)
                if m.shape != (n, h):
                    raise ValueError(f"degree {l} mask must have shape {(n, h)}")
                clean[l] = m
                self.features[l] = self.features[l] * m[..., None]
            self.mask = clean

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "TensorCloud":
        return TensorCloud(
            self.spec,
            {l: v.copy() for l, v in self.features.items()},
            self.positions.copy(),
            None if self.mask is None else {l: m.copy() for l, m in self.mask.items()},
        )

    def rotated(self, rotation: np.ndarray) -> "TensorCloud":
        """Rotate positions and features together (the SO(3) action)."""
        return TensorCloud(
            self.spec,
            rotate_features(self.features, rotation),
            self.positions @ np.asarray(rotation).T,
            self.mask,
        )


def zeros_like(x: TensorCloud) -> TensorCloud:
    return TensorCloud(
        x.spec,
        {l: np.zeros_like(v) for l, v in x.features.items()},
        np.zeros_like(x.positions),
        x.mask,
    )


def _check_conformable(x: TensorCloud, y: TensorCloud) -> None:
    if x.spec != y.spec:
        raise ValueError(f"irreps specs differ: {x.spec} vs {y.spec}")
    if x.n_nodes != y.n_nodes:
        raise ValueError(f"node counts differ: {x.n_nodes} vs {y.n_nodes}")
    if (x.mask is None) != (y.mask is None):
        raise ValueError("one cloud is masked, the other is not")
    if x.mask is not None:
        for l in x.mask:
            if not np.array_equal(x.mask[l], y.mask[l]):
                raise ValueError("channel masks differ")


def dot(x: TensorCloud, y: TensorCloud) -> float:
    """Sum over nodes of feature dot plus position dot; masked slots excluded."""
    _check_conformable(x, y)
    total = float(np.sum(x.positions * y.positions))
    for l in x.features:
        total += float(np.sum(x.features[l] * y.features[l]))
    return total


def norm(x: TensorCloud) -> float:
    return float(np.sqrt(dot(x, x)))


def axpy(a: float, x: TensorCloud, y: TensorCloud) -> TensorCloud:
    """a*x + y on both features and positions."""
    _check_conformable(x, y)
    return TensorCloud(
        x.spec,
        {l: a * x.features[l] + y.features[l] for l in x.features},
        a * x.positions + y.positions,
        x.mask,
    )


def scale(a: float, x: TensorCloud) -> TensorCloud:
    return axpy(a, x, zeros_like(x))


def sample_gaussian(
    spec: IrrepsSpec,
    n_nodes: int,
    scales: NoiseScales,
    rng: np.random.Generator,
    mask: dict[int, np.ndarray] | None = None,
) -> TensorCloud:
    """I.i.d. normal cloud: features with var_features, positions with var_positions.

    The draw is isotropic degree-wise, so rotating a sampled cloud has the
    same distribution as sampling directly; masked channels are zeroed
    after the draw (the rng stream does not depend on the mask).
    """
    feats = {}
    sig_v = float(np.sqrt(scales.var_features))
    for l, h in spec.entries:
        feats[l] = rng.normal(scale=sig_v, size=(n_nodes, h, 2 * l + 1))
    positions = rng.normal(scale=float(np.sqrt(scales.var_positions)), size=(n_nodes, 3))
    return TensorCloud(spec, feats, positions, mask)


def centroid(x: TensorCloud) -> np.ndarray:
    if x.n_nodes < 1:
        raise ValueError("centroid of an empty cloud")
    return x.positions.mean(axis=0)


def recenter(x: TensorCloud) -> TensorCloud:
    """Subtract the position centroid; features untouched."""
    out = x.copy()
    out.positions = out.positions - centroid(x)
    return out
