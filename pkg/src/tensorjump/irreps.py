"""Exact SO(3) representation algebra in a real basis.

Features of degree l are real arrays with 2l+1 components.  One basis
convention is shared by every operation here:

* component normalization: ``Y_0 = [1]`` and the degree-1 harmonics are
  literally the unit direction, ordered ``(x, y, z)``;
* degrees l >= 2 use ascending-m ordering of the real harmonics scaled
  so that ``sum_m Y_lm(r)^2 = 1`` on the unit sphere;
* Clebsch-Gordan tensors are unitary per output component
  (``sum_{m1,m2} C^2 = 1`` for every m3), which keeps every tensor
  product path norm-bounded by 1 for unit inputs.

Wigner-D matrices are solved from the harmonics themselves, so
``wigner_d(l, R) @ Y_l(r) == Y_l(R r)`` holds by construction.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_DEGENERATE_TOL = 1e-12


class DegenerateDirectionError(ValueError):
    """Raised for zero-length direction vectors ("degenerate direction")."""


@dataclass(frozen=True)
class IrrepsSpec:
    """Sorted list of (degree, multiplicity) pairs with distinct degrees."""

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        degrees = [l for l, _ in self.entries]
        if degrees != sorted(set(degrees)):
            raise ValueError("degrees must be sorted and distinct")
        if any(l < 0 for l in degrees):
            raise ValueError("degrees must be non-negative")
        if any(h < 1 for _, h in self.entries):
            raise ValueError("multiplicities must be >= 1")

    @classmethod
    def make(cls, *entries: tuple[int, int]) -> "IrrepsSpec":
        return cls(tuple(sorted((int(l), int(h)) for l, h in entries)))

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(l for l, _ in self.entries)

    @property
    def lmax(self) -> int:
        return max(self.degrees) if self.entries else 0

    def mult(self, l: int) -> int:
        for ll, h in self.entries:
            if ll == l:
                return h
        return 0

    @property
    def dim(self) -> int:
        return sum(h * (2 * l + 1) for l, h in self.entries)

    def __str__(self):
        return " + ".join(f"{h}x{l}" for l, h in self.entries)


def feature_spec(features: dict) -> IrrepsSpec:
    """Infer the IrrepsSpec of a {degree: (..., H, 2l+1)} feature dict."""
    entries = []
    for l in sorted(features):
        arr = ad.value_of(features[l])
        if arr.shape[-1] != 2 * l + 1:
            raise ValueError(f"degree {l} features must have {2 * l + 1} components")
        entries.append((l, arr.shape[-2]))
    return IrrepsSpec(tuple(entries))


# ---------------------------------------------------------------------------
# real spherical harmonics
# ---------------------------------------------------------------------------


def _ferrers(lmax: int, z: np.ndarray, rho: np.ndarray) -> dict:
    """Associated Legendre functions P_l^m without Condon-Shortley phase.

    Evaluated on unit vectors, with sin(theta)^m expressed through rho.
    Returns {(l, m): array} for 0 <= m <= l <= lmax.
    """
    p = {(0, 0): np.ones_like(z)}
    for m in range(1, lmax + 1):
        p[(m, m)] = p[(m - 1, m - 1)] * rho * (2 * m - 1)
    for m in range(0, lmax):
        p[(m + 1, m)] = z * (2 * m + 1) * p[(m, m)]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            p[(l, m)] = ((2 * l - 1) * z * p[(l - 1, m)] - (l + m - 1) * p[(l - 2, m)]) / (l - m)
    return p


def _sph_all(lmax: int, units: np.ndarray) -> dict:
    """Component-normalized real harmonics of unit vectors, all degrees <= lmax."""
    x, y, z = units[..., 0], units[..., 1], units[..., 2]
    rho = np.sqrt(x * x + y * y)
    safe = np.where(rho > _DEGENERATE_TOL, rho, 1.0)
    # cos(m phi), sin(m phi) built by angle-addition; at the poles rho^m
    # multiplies them to zero so the arbitrary phi there is harmless
    cos_m = [np.ones_like(x), np.where(rho > _DEGENERATE_TOL, x / safe, 1.0)]
    sin_m = [np.zeros_like(x), np.where(rho > _DEGENERATE_TOL, y / safe, 0.0)]
    for m in range(2, lmax + 1):
        cos_m.append(cos_m[m - 1] * cos_m[1] - sin_m[m - 1] * sin_m[1])
        sin_m.append(sin_m[m - 1] * cos_m[1] + cos_m[m - 1] * sin_m[1])

    p = _ferrers(lmax, z, rho)
    out = {}
    for l in range(lmax + 1):
        comps = np.empty(units.shape[:-1] + (2 * l + 1,))
        comps[..., l] = p[(l, 0)]
        for m in range(1, l + 1):
            c = math.sqrt(2.0 * math.factorial(l - m) / math.factorial(l + m))
            comps[..., l + m] = c * p[(l, m)] * cos_m[m]
            comps[..., l - m] = c * p[(l, m)] * sin_m[m]
        if l == 1:
            comps = comps[..., _L1_PERM]
        out[l] = comps
    return out


# degree-1 components are stored as (x, y, z); in ascending-m order the
# real harmonics come out as (y, z, x)
_L1_PERM = np.array([2, 0, 1])


def spherical_harmonics(l: int, r) -> np.ndarray:
    """Real spherical harmonics of direction(s) r, shape (..., 2l+1).

    r is normalized internally; zero-length input raises
    DegenerateDirectionError.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 3:
        raise ValueError("direction vectors must have 3 components")
    norm = np.linalg.norm(r, axis=-1)
    if np.any(norm < _DEGENERATE_TOL):
        raise DegenerateDirectionError("degenerate direction")
    units = r / norm[..., None]
    return _sph_all(l, units)[l]


def spherical_harmonics_all(lmax: int, units: np.ndarray) -> dict:
    """All degrees 0..lmax for pre-normalized unit vectors (no checks)."""
    return _sph_all(lmax, units)


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------


def _su2_cg(j1: int, j2: int, j3: int, m1: int, m2: int, m3: int) -> float:
    # Racah's closed form, exact integer arithmetic inside the square root
    if m3 != m1 + m2:
        return 0.0
    f = math.factorial
    pre = (2 * j3 + 1) * f(j3 + j1 - j2) * f(j3 - j1 + j2) * f(j1 + j2 - j3) / f(j1 + j2 + j3 + 1)
    pre *= f(j3 + m3) * f(j3 - m3) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)
    total = 0.0
    k_min = max(0, j2 - j3 - m1, j1 - j3 + m2)
    k_max = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    for k in range(k_min, k_max + 1):
        den = (
            f(k)
            * f(j1 + j2 - j3 - k)
            * f(j1 - m1 - k)
            * f(j2 + m2 - k)
            * f(j3 - j2 + m1 + k)
            * f(j3 - j1 - m2 + k)
        )
        total += (-1.0) ** k / den
    return math.sqrt(pre) * total


def _su2_cg_tensor(l1: int, l2: int, l3: int) -> np.ndarray:
    c = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for i, m1 in enumerate(range(-l1, l1 + 1)):
        for k, m2 in enumerate(range(-l2, l2 + 1)):
            m3 = m1 + m2
            if -l3 <= m3 <= l3:
                c[i, k, m3 + l3] = _su2_cg(l1, l2, l3, m1, m2, m3)
    return c


def _real_basis_change(l: int) -> np.ndarray:
    """Unitary map from complex to our real components (rows: real index)."""
    q = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    for m in range(-l, 0):
        q[l + m, l + abs(m)] = 1 / math.sqrt(2)
        q[l + m, l - abs(m)] = -1j / math.sqrt(2)
    q[l, l] = 1.0
    for m in range(1, l + 1):
        q[l + m, l + abs(m)] = (-1) ** m / math.sqrt(2)
        q[l + m, l - abs(m)] = 1j * (-1) ** m / math.sqrt(2)
    q = (-1j) ** l * q  # phase making the real CG tensors real
    if l == 1:
        q = q[:, _L1_PERM]  # real-index axis follows the (x, y, z) ordering
    return q


class CgTable:
    """Cache of real-basis Clebsch-Gordan tensors keyed by (l1, l2, l3).

    Built lazily, read-only afterwards; optionally persisted to the
    directory named by the TENSORJUMP_CACHE environment variable.
    """

    def __init__(self):
        self._table: dict[tuple[int, int, int], np.ndarray] = {}
        self._loaded_disk = False

    def _disk_path(self):
        root = os.environ.get("TENSORJUMP_CACHE")
        if not root:
            return None
        return os.path.join(root, "cg_table_v1.npz")

    def _load_disk(self):
        if self._loaded_disk:
            return
        self._loaded_disk = True
        path = self._disk_path()
        if path and os.path.exists(path):
            with np.load(path) as data:
                for key in data.files:
                    l1, l2, l3 = (int(t) for t in key.split("_"))
                    self._table[(l1, l2, l3)] = data[key]

    def _save_disk(self):
        path = self._disk_path()
        if not path:
            return
        os.makedirs(os.path.dirname(path), exist_ok=True)
        np.savez(path, **{f"{a}_{b}_{c}": v for (a, b, c), v in self._table.items()})

    def get(self, l1: int, l2: int, l3: int) -> np.ndarray:
        if not (abs(l1 - l2) <= l3 <= l1 + l2):
            raise ValueError(f"triangle inequality violated for ({l1}, {l2}, {l3})")
        key = (l1, l2, l3)
        self._load_disk()
        if key not in self._table:
            q1 = _real_basis_change(l1)
            q2 = _real_basis_change(l2)
            q3 = _real_basis_change(l3)
            c = _su2_cg_tensor(l1, l2, l3)
            real = np.einsum("ij,kl,nm,ikn->jlm", q1, q2, np.conj(q3), c)
            if np.abs(real.imag).max() > 1e-10:
                raise AssertionError("real-basis CG came out complex")
            self._table[key] = np.ascontiguousarray(real.real)
            self._save_disk()
        return self._table[key]


_CG = CgTable()


def clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis CG tensor of shape (2l1+1, 2l2+1, 2l3+1)."""
    return _CG.get(l1, l2, l3)


# ---------------------------------------------------------------------------
# Wigner-D matrices and rotations
# ---------------------------------------------------------------------------


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-10:
        raise ValueError("rotation matrix is not orthogonal")
    if abs(np.linalg.det(rotation) - 1.0) > 1e-10:
        raise ValueError("rotation matrix must be proper (det = +1)")
    return rotation


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def wigner_d(l: int, rotation) -> np.ndarray:
    """Real Wigner-D matrix so that wigner_d(l, R) @ Y_l(r) = Y_l(R r)."""
    rotation = _check_rotation(rotation)
    if l == 0:
        return np.ones((1, 1))
    if l == 1:
        return rotation.copy()
    pts = _fibonacci_sphere(4 * l + 6)
    a = _sph_all(l, pts)[l]
    b = _sph_all(l, pts @ rotation.T)[l]
    d, *_ = np.linalg.lstsq(a, b, rcond=None)
    return d.T


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-ish random proper rotation from a random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate_features(features: dict, rotation) -> dict:
    """Apply the degree-wise Wigner-D action to a feature dict."""
    rotation = _check_rotation(rotation)
    out = {}
    for l, arr in features.items():
        if l == 0:
            out[l] = ad.value_of(arr).copy() if not ad.is_var(arr) else arr
        else:
            d = wigner_d(l, rotation)
            out[l] = ad.einsum("ij,...hj->...hi", d, arr)
    return out


# ---------------------------------------------------------------------------
# degree-wise operations on feature dicts
# ---------------------------------------------------------------------------


def tensor_product(a, b, l_out: int):
    """Channel-wise CG contraction of two same-multiplicity irreps.

    a: (..., H, 2l1+1), b: (..., H, 2l2+1) -> (..., H, 2l_out+1).
    Contracted in two steps (b into the CG tensor, then a batched
    mat-vec): far cheaper than one three-operand einsum on small inputs.
    """
    av, bv = ad.value_of(a), ad.value_of(b)
    l1 = (av.shape[-1] - 1) // 2
    l2 = (bv.shape[-1] - 1) // 2
    if av.shape[-2] != bv.shape[-2]:
        raise ValueError("channel-wise tensor product needs matching multiplicities")
    cg = clebsch_gordan(l1, l2, l_out)
    half = ad.einsum("pqr,...hq->...hpr", cg, b)
    lead = av.shape[:-1]
    a_row = ad.reshape(a, lead + (1, av.shape[-1]))
    out = ad.matmul_pair(a_row, half)
    return ad.reshape(out, lead[:-1] + (lead[-1], 2 * l_out + 1))


def tensor_square_layout(spec: IrrepsSpec, max_degree: int | None = None,
                         skip_null: bool = False) -> list:
    """Deterministic layout of input ⊕ per-channel squares.

    Returns a list of entries ``("input", l)`` and ``("square", l1, l2, l3)``
    in output order (a pure function of the input spec).  With skip_null,
    same-degree paths of odd output degree are dropped: the per-channel
    square is symmetric, so those contractions vanish identically.
    """
    layout = [("input", l) for l, _ in spec.entries]
    for i, (l1, _) in enumerate(spec.entries):
        for l2, _ in spec.entries[i:]:
            for l3 in range(abs(l1 - l2), l1 + l2 + 1):
                if max_degree is not None and l3 > max_degree:
                    continue
                if skip_null and l1 == l2 and (l3 % 2 == 1):
                    continue
                layout.append(("square", l1, l2, l3))
    return layout


def tensor_square(features: dict, max_degree: int | None = None,
                  skip_null: bool = False) -> dict:
    """Input concatenated with all CG-allowed per-channel squares.

    Output multiplicity per degree grows by H for every contributing
    path; the layout (input copy first, then squares ordered by
    (l1, l2)) is fixed by tensor_square_layout.
    """
    spec = feature_spec(features)
    parts: dict[int, list] = {}
    for kind, *rest in tensor_square_layout(spec, max_degree, skip_null):
        if kind == "input":
            (l,) = rest
            parts.setdefault(l, []).append(features[l])
        else:
            l1, l2, l3 = rest
            h1, h2 = spec.mult(l1), spec.mult(l2)
            if h1 != h2:
                raise ValueError("per-channel square needs equal multiplicities")
            parts.setdefault(l3, []).append(tensor_product(features[l1], features[l2], l3))
    return {l: (chunk[0] if len(chunk) == 1 else ad.concat(chunk, axis=-2)) for l, chunk in sorted(parts.items())}


def linear_mix(features: dict, weights: dict) -> dict:
    """Degree-wise channel mixing: out_l = W_l @ V_l, no cross-degree coupling."""
    out = {}
    for l, w in sorted(weights.items()):
        if l not in features:
            raise ValueError(f"no degree-{l} features to mix")
        wv = ad.value_of(w)
        fv = ad.value_of(features[l])
        if wv.shape[1] != fv.shape[-2]:
            raise ValueError(
                f"degree {l}: weight shape {wv.shape} does not match multiplicity {fv.shape[-2]}"
            )
        out[l] = ad.matmul_left(w, features[l])
    return out


def layer_norm(features: dict, eps: float = 1e-6) -> dict:
    """Rotation-safe layer norm.

    Degree 0 gets a standard layer norm over channels; higher degrees
    rescale each channel vector by the RMS of the channel norms, so only
    invariant magnitudes are touched.
    """
    out = {}
    for l, arr in sorted(features.items()):
        if l == 0:
            mu = ad.reduce_mean(arr, axis=-2, keepdims=True)
            centered = ad.sub(arr, mu)
            var = ad.reduce_mean(ad.mul(centered, centered), axis=-2, keepdims=True)
            out[l] = ad.mul(centered, _rsqrt_eps(var, eps))
        else:
            sq = ad.reduce_sum(ad.mul(arr, arr), axis=-1, keepdims=True)
            ms = ad.reduce_mean(sq, axis=-2, keepdims=True)
            out[l] = ad.mul(arr, _rsqrt_eps(ms, eps))
    return out


def _rsqrt_eps(x, eps: float):
    root = ad.sqrt(ad.add(x, eps))
    if ad.is_var(root):
        return _reciprocal(root)
    return 1.0 / root


def _reciprocal(x):
    xv = ad.value_of(x)
    out = 1.0 / xv
    if not ad.is_var(x):
        return out

    def backward(g):
        ad._accumulate(x, -g * out * out)

    return ad.Var(out, (x,), backward)
