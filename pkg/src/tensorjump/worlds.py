"""Ground-truth data sources at desk scale.

Overdamped (Brownian) dynamics over analytic potentials provides the
training and reference trajectories; small world adapters encode raw
simulator states into tensor clouds and back.  The all-atom protein
encoding (C-alpha anchored offset vectors with padding masks) is the
interface through which external structure data enters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .cloud import TensorCloud
from .irreps import IrrepsSpec

KB_DEFAULT = 1.0  # energies are expressed in units of k_B T by default


# ---------------------------------------------------------------------------
# analytic potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoubleWell:
    """Bistable well along x, harmonic confinement on the other axes.

    E = a (x^2 - 1)^2 + (k/2) sum(y_i^2) + tilt * x.  The double-well
    physics lives in the (x, y) plane; the third coordinate carries the
    same harmonic confinement so that every embedded degree of freedom
    fluctuates (an exactly frozen coordinate would make the latent noise
    regression stiff near the interpolant endpoints).
    """

    a: float = 2.0
    k: float = 4.0
    tilt: float = 0.0
    kind: str = "double_well"
    dim: int = 3

    def energy(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        rest = 0.5 * self.k * (x[..., 1:] ** 2).sum(axis=-1)
        return self.a * (x[..., 0] ** 2 - 1.0) ** 2 + rest + self.tilt * x[..., 0]

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = self.k * x
        g[..., 0] = 4.0 * self.a * x[..., 0] * (x[..., 0] ** 2 - 1.0) + self.tilt
        return g


@dataclass(frozen=True)
class HarmonicChain:
    """Beads on springs: E = k/2 sum_i (|x_{i+1} - x_i| - r0)^2 in 3D."""

    n_beads: int = 4
    k: float = 1.0
    r0: float = 1.0
    kind: str = "harmonic_chain"

    @property
    def dim(self) -> int:
        return 3 * self.n_beads

    def _bonds(self, x):
        pts = x.reshape(x.shape[:-1] + (self.n_beads, 3))
        d = pts[..., 1:, :] - pts[..., :-1, :]
        r = np.linalg.norm(d, axis=-1)
        return pts, d, r

    def energy(self, x: np.ndarray) -> np.ndarray:
        _, _, r = self._bonds(np.asarray(x, dtype=np.float64))
        return 0.5 * self.k * ((r - self.r0) ** 2).sum(axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        pts, d, r = self._bonds(x)
        safe = np.where(r > 1e-12, r, 1.0)
        f = self.k * (r - self.r0)[..., None] * d / safe[..., None]
        g = np.zeros_like(pts)
        g[..., :-1, :] -= f
        g[..., 1:, :] += f
        return g.reshape(x.shape)


@dataclass(frozen=True)
class GaussianMixture3D:
    """E = -kT log sum_w N(x; center, width^2 I); a soft multi-basin landscape."""

    centers: tuple = ((0.0, 0.0, 0.0),)
    weights: tuple = (1.0,)
    widths: tuple = (1.0,)
    kT: float = 1.0
    kind: str = "gaussian_mixture_3d"
    dim: int = 3

    def _components(self, x):
        c = np.asarray(self.centers, dtype=np.float64)  # (M, 3)
        w = np.asarray(self.weights, dtype=np.float64)
        s = np.asarray(self.widths, dtype=np.float64)
        diff = x[..., None, :] - c  # (..., M, 3)
        q = (diff**2).sum(axis=-1) / (2.0 * s**2)
        comp = w * np.exp(-q) / s**3
        return diff, s, comp

    def energy(self, x: np.ndarray) -> np.ndarray:
        _, _, comp = self._components(np.asarray(x, dtype=np.float64))
        return -self.kT * np.log(comp.sum(axis=-1))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        diff, s, comp = self._components(x)
        total = comp.sum(axis=-1, keepdims=True)
        weights = (comp / total[..., 0][..., None])[..., None]
        return self.kT * (weights * diff / (s**2)[:, None]).sum(axis=-2)


POTENTIALS = {
    "double_well": DoubleWell,
    "harmonic_chain": HarmonicChain,
    "gaussian_mixture_3d": GaussianMixture3D,
}


# ---------------------------------------------------------------------------
# Brownian dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BdConfig:
    """Overdamped integrator settings; friction may be a diagonal vector."""

    dt: float = 0.01
    kT: float = 1.0
    friction: float | np.ndarray = 1.0
    steps: int = 1000
    stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if np.any(np.asarray(self.friction) <= 0):
            raise ValueError("friction must be positive definite")


def bd_step(x: np.ndarray, potential, config: BdConfig, rng: np.random.Generator) -> np.ndarray:
    """One Euler-Maruyama step of x' = x - R^-1 grad E dt + sqrt(2 kT dt) R^-1/2 xi.

    The noise amplitude follows fluctuation-dissipation, so the zero-force
    displacement covariance is 2 kT R^-1 dt.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(config.friction, dtype=np.float64)
    drift = -potential.gradient(x) / r * config.dt
    kick = np.sqrt(2.0 * config.kT * config.dt / r) * rng.normal(size=x.shape)
    out = x + drift + kick
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite state in Brownian step")
    return out


def simulate(potential, config: BdConfig, x0: np.ndarray,
             rng: np.random.Generator) -> np.ndarray:
    """Strided trajectory (n_frames, ..., dim) including the initial state.

    Leading axes of x0 run independent walkers, so ensembles integrate
    vectorized in one pass.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    frames = [x.copy()]
    for step in range(1, config.steps + 1):
        x = bd_step(x, potential, config, rng)
        if step % config.stride == 0:
            frames.append(x.copy())
    return np.stack(frames)


# ---------------------------------------------------------------------------
# toy world adapters
# ---------------------------------------------------------------------------


class ParticleAnchorWorld:
    """Single diffusing particle encoded against a fixed origin anchor.

    The transported state is pure geometry: two nodes (particle, anchor)
    with no feature channels — every dynamical quantity lives in the
    relative position.  Lab-frame axis vectors, which let an equivariant
    network express the anisotropy of the potential, ride on a separate
    conditioning cloud consumed only by the conditioner network; they are
    re-supplied at every simulation step like the node labels, never
    transported.  Rotating a cloud, anchors included, is still a symmetry.
    """

    labels = ("PARTICLE", "ANCHOR")
    spec = IrrepsSpec(())  # transported features: none, positions only
    cond_spec = IrrepsSpec(((1, 2),))  # lab-frame axis vectors e_x, e_y

    def __init__(self, potential):
        if potential.dim != 3:
            raise ValueError("particle worlds live in 3D")
        self.potential = potential
        self.dim = potential.dim

    def encode(self, state: np.ndarray) -> TensorCloud:
        return self.encode_batch(np.asarray(state)[None])[0]

    def encode_batch(self, states: np.ndarray) -> list[TensorCloud]:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return [
            TensorCloud(self.spec, {}, np.stack([s, np.zeros(3)])) for s in states
        ]

    def conditioning(self, cloud: TensorCloud) -> TensorCloud:
        """Augment a state cloud with the frame-anchor features."""
        axes = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        feats = {1: np.tile(axes[None], (cloud.n_nodes, 1, 1))}
        return TensorCloud(self.cond_spec, feats, cloud.positions)

    def decode(self, cloud: TensorCloud) -> np.ndarray:
        return (cloud.positions[0] - cloud.positions[1]).copy()

    def decode_frames(self, clouds) -> np.ndarray:
        return np.stack([self.decode(c) for c in clouds])

    def renew(self, cloud: TensorCloud) -> TensorCloud:
        """Re-pin the anchor to the origin (removes free centroid drift)."""
        return self.encode(self.decode(cloud))


class ChainWorld:
    """Harmonic chain: beads are the nodes, coordinates are the state."""

    spec = IrrepsSpec(())
    cond_spec = IrrepsSpec(())

    def __init__(self, potential: HarmonicChain):
        self.potential = potential
        self.n = potential.n_beads
        self.labels = ("BEAD",) * self.n
        self.dim = potential.dim

    def encode(self, state: np.ndarray) -> TensorCloud:
        pts = np.asarray(state, dtype=np.float64).reshape(self.n, 3)
        return TensorCloud(self.spec, {}, pts)

    def encode_batch(self, states: np.ndarray) -> list[TensorCloud]:
        return [self.encode(s) for s in np.atleast_2d(states)]

    def conditioning(self, cloud: TensorCloud) -> TensorCloud:
        return cloud

    def decode(self, cloud: TensorCloud) -> np.ndarray:
        return cloud.positions.reshape(-1).copy()

    def decode_frames(self, clouds) -> np.ndarray:
        return np.stack([self.decode(c) for c in clouds])

    def renew(self, cloud: TensorCloud) -> TensorCloud:
        return cloud


def build_world(potential):
    if isinstance(potential, HarmonicChain):
        return ChainWorld(potential)
    return ParticleAnchorWorld(potential)


def conditioning_for(labels):
    """Per-step conditioning builder inferred from node labels.

    Particle-anchor worlds re-supply the lab-frame axis features; other
    systems condition on the state cloud itself.
    """
    if labels is not None and "ANCHOR" in labels:
        world = ParticleAnchorWorld(DoubleWell())
        return world.conditioning
    return None


def cond_spec_for(labels) -> IrrepsSpec | None:
    """Conditioning-cloud spec implied by the node labels (None = state spec)."""
    if labels is not None and "ANCHOR" in labels:
        return ParticleAnchorWorld.cond_spec
    return None


# ---------------------------------------------------------------------------
# datasets of consecutive-frame pairs
# ---------------------------------------------------------------------------


@dataclass
class PairDataset:
    """Strided trajectories plus the (trajectory, frame) index of usable pairs."""

    world: object
    states: np.ndarray  # (n_traj, n_frames, dim)
    pair_lag: int
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            n_traj, n_frames, _ = self.states.shape
            self.pairs = [
                (j, t) for j in range(n_traj) for t in range(n_frames - self.pair_lag)
            ]

    def __len__(self) -> int:
        return len(self.pairs)

    def pair_clouds(self, index: int) -> tuple[tuple, TensorCloud, TensorCloud]:
        j, t = self.pairs[index]
        x0 = self.world.encode(self.states[j, t])
        x1 = self.world.encode(self.states[j, t + self.pair_lag])
        return self.world.labels, x0, x1

    def batch(self, indices) -> list:
        return [self.pair_clouds(i) for i in indices]


def generate_dataset(potential, config: BdConfig, n_trajectories: int, pair_lag: int,
                     rng: np.random.Generator, x0: np.ndarray | None = None) -> PairDataset:
    """Simulate, stride and index consecutive-pair training data.

    The lag counts strided frames; pairs never cross trajectories.
    """
    if pair_lag < 1:
        raise ValueError("pair_lag must be >= 1")
    world = build_world(potential)
    if x0 is None:
        x0 = rng.normal(scale=0.5, size=(n_trajectories, potential.dim))
        if isinstance(potential, DoubleWell):
            # start half the walkers in each well
            x0[:, 0] += np.where(np.arange(n_trajectories) % 2 == 0, 1.0, -1.0)
        if isinstance(potential, HarmonicChain):
            base = np.zeros((potential.n_beads, 3))
            base[:, 0] = np.arange(potential.n_beads) * potential.r0
            x0 = base.reshape(-1) + 0.1 * rng.normal(size=(n_trajectories, potential.dim))
    states = simulate(potential, config, np.asarray(x0, dtype=np.float64), rng)
    states = np.moveaxis(states, 0, 1)  # (n_traj, n_frames, dim)
    return PairDataset(world, states, pair_lag)


# ---------------------------------------------------------------------------
# all-atom protein representation
# ---------------------------------------------------------------------------

MAX_SIDE_SLOTS = 13  # heavy atoms beyond CA never exceed this (TRP)


def _load_residue_tables() -> tuple[dict, dict]:
    atoms: dict[str, list[str]] = {}
    bonds: dict[str, list[tuple[str, str]]] = {}
    text = resources.files("tensorjump.data").joinpath("residue_topology.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, kind, *values = line.split()
        if kind == "atoms":
            atoms[name] = values
        elif kind == "bonds":
            bonds[name] = [tuple(v.split("-")) for v in values]
    return atoms, bonds


RESIDUE_ATOMS, RESIDUE_BONDS = _load_residue_tables()
RESIDUE_VOCAB = tuple(sorted(RESIDUE_ATOMS))


def load_vdw_radii() -> dict[str, float]:
    radii = {}
    text = resources.files("tensorjump.data").joinpath("vdw_radii.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        element, value = line.split()
        radii[element] = float(value)
    return radii


PROTEIN_SPEC = IrrepsSpec(((1, MAX_SIDE_SLOTS),))


@dataclass(frozen=True)
class ProteinTopology:
    """Residue labels plus everything derived from the canonical tables."""

    labels: tuple[str, ...]

    def __post_init__(self):
        unknown = [r for r in self.labels if r not in RESIDUE_ATOMS]
        if unknown:
            raise ValueError(f"unknown residue labels: {unknown}")

    @property
    def n_residues(self) -> int:
        return len(self.labels)

    def atom_counts(self) -> np.ndarray:
        return np.array([len(RESIDUE_ATOMS[r]) for r in self.labels])

    def channel_mask(self) -> dict[int, np.ndarray]:
        mask = np.zeros((self.n_residues, MAX_SIDE_SLOTS), dtype=bool)
        for i, count in enumerate(self.atom_counts()):
            mask[i, :count] = True
        return {1: mask}

    def atom_names(self) -> list[list[str]]:
        return [["CA"] + RESIDUE_ATOMS[r] for r in self.labels]

    def atom_elements(self) -> list[str]:
        return [name[0] for names in self.atom_names() for name in names]

    def bonds(self) -> list[tuple[int, int]]:
        """Global atom-index bond list: residue tables + peptide links."""
        offsets = np.concatenate([[0], np.cumsum(1 + self.atom_counts())])
        index: list[dict[str, int]] = []
        for i, names in enumerate(self.atom_names()):
            index.append({name: offsets[i] + j for j, name in enumerate(names)})
        out = []
        for i, label in enumerate(self.labels):
            for a, b in RESIDUE_BONDS[label]:
                out.append((index[i][a], index[i][b]))
            if label == "PRO":
                out.append((index[i]["CD"], index[i]["N"]))
            if i + 1 < self.n_residues:
                out.append((index[i]["C"], index[i + 1]["N"]))
        return out


def encode_protein(topology: ProteinTopology, residue_coords: list) -> TensorCloud:
    """C-alpha anchored cloud: position = CA, features = padded atom offsets.

    `residue_coords[i]` holds the atoms of residue i in canonical order
    (CA first) as an (n_i + 1, 3) array.
    """
    counts = topology.atom_counts()
    if len(residue_coords) != topology.n_residues:
        raise ValueError("coordinate groups do not match residue count")
    positions = np.zeros((topology.n_residues, 3))
    offsets = np.zeros((topology.n_residues, MAX_SIDE_SLOTS, 3))
    for i, coords in enumerate(residue_coords):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (counts[i] + 1, 3):
            raise ValueError(
                f"residue {i} ({topology.labels[i]}) expects {counts[i] + 1} atoms, "
                f"got {coords.shape[0]}"
            )
        positions[i] = coords[0]
        offsets[i, : counts[i]] = coords[1:] - coords[0]
    return TensorCloud(PROTEIN_SPEC, {1: offsets}, positions, topology.channel_mask())


def decode_protein(cloud: TensorCloud, topology: ProteinTopology) -> list[np.ndarray]:
    """Inverse of encode_protein on the unmasked slots."""
    counts = topology.atom_counts()
    if cloud.n_nodes != topology.n_residues:
        raise ValueError("cloud and topology disagree on residue count")
    if cloud.mask is not None and not np.array_equal(
        cloud.mask[1], topology.channel_mask()[1]
    ):
        raise ValueError("cloud mask does not match the topology")
    out = []
    for i in range(topology.n_residues):
        atoms = np.zeros((counts[i] + 1, 3))
        atoms[0] = cloud.positions[i]
        atoms[1:] = cloud.positions[i] + cloud.features[1][i, : counts[i]]
        out.append(atoms)
    return out


def flatten_atoms(residue_coords: list) -> np.ndarray:
    return np.concatenate([np.asarray(c, dtype=np.float64) for c in residue_coords])
