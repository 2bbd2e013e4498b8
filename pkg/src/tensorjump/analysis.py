"""Equilibrium analysis and evaluation of sampled dynamics.

The reweighting pipeline mirrors the reference methodology: featurize,
fit a time-lagged component model on the reference data, cluster the
projections, estimate a Markov state model at a long lag, and weight
every frame by the stationary mass of its cluster over the cluster's
population.  Structural observables and divergences compare sampled
ensembles against references under a shared binning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "TicaModel",
    "MsmModel",
    "featurize_ca_distances",
    "tica_fit",
    "tica_project",
    "kmeans",
    "msm_estimate",
    "stationary_distribution",
    "reweight_histogram",
    "cluster_weights_for_training",
    "kabsch_align",
    "rmsd",
    "gdt",
    "radius_of_gyration",
    "fraction_native_contacts",
    "js_divergence",
    "free_energy",
    "chemistry_report",
    "shared_bins",
]


def _as_traj_list(features) -> list[np.ndarray]:
    if isinstance(features, np.ndarray):
        return [features]
    return [np.asarray(f, dtype=np.float64) for f in features]


def featurize_ca_distances(positions: np.ndarray) -> np.ndarray:
    """Upper-triangle pairwise node distances per frame.

    positions: (frames, n_nodes, 3) anchor coordinates; needs >= 2 nodes.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[1]
    if n < 2:
        raise ValueError("need at least two residues for pair distances")
    iu, ju = np.triu_indices(n, k=1)
    diff = positions[:, iu] - positions[:, ju]
    return np.linalg.norm(diff, axis=-1)


# ---------------------------------------------------------------------------
# TICA
# ---------------------------------------------------------------------------


@dataclass
class TicaModel:
    lag: int
    mean: np.ndarray
    components: np.ndarray  # (dim, n_components), leading first
    eigenvalues: np.ndarray
    featurization: str = "ca_distances"


def tica_fit(features, lag: int, ridge: float = 1e-6) -> TicaModel:
    """Symmetrized time-lagged generalized eigenproblem.

    `features` is one (frames, dim) matrix or a list of them (one per
    trajectory; lagged pairs never cross trajectories).  Eigenvectors are
    sorted by descending eigenvalue with the sign fixed so the
    largest-magnitude entry is positive.
    """
    trajs = _as_traj_list(features)
    if lag < 1:
        raise ValueError("lag must be >= 1")
    if all(t.shape[0] <= lag for t in trajs):
        raise ValueError("lag must be smaller than the trajectory length")
    dim = trajs[0].shape[1]
    mean = np.zeros(dim)
    count = 0
    for t in trajs:
        if t.shape[0] <= lag:
            continue
        mean += t[:-lag].sum(axis=0) + t[lag:].sum(axis=0)
        count += 2 * (t.shape[0] - lag)
    mean /= count
    c0 = np.zeros((dim, dim))
    ct = np.zeros((dim, dim))
    for t in trajs:
        if t.shape[0] <= lag:
            continue
        a = t[:-lag] - mean
        b = t[lag:] - mean
        c0 += a.T @ a + b.T @ b
        ct += a.T @ b + b.T @ a
    c0 /= count
    ct /= count
    try:
        np.linalg.cholesky(c0)
    except np.linalg.LinAlgError:
        warnings.warn("singular covariance; adding ridge regularization", RuntimeWarning)
        c0 = c0 + ridge * np.eye(dim)
    eigenvalues, vectors = scipy.linalg.eigh(ct, c0)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    vectors = vectors[:, order]
    for j in range(vectors.shape[1]):
        i = np.argmax(np.abs(vectors[:, j]))
        if vectors[i, j] < 0:
            vectors[:, j] = -vectors[:, j]
    return TicaModel(lag=lag, mean=mean, components=vectors, eigenvalues=eigenvalues)


def tica_project(model: TicaModel, features, n_components: int | None = None) -> np.ndarray:
    """Mean-centered projection onto the leading components."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[-1] != model.mean.shape[0]:
        raise ValueError(
            f"feature dimension {feats.shape[-1]} does not match model "
            f"dimension {model.mean.shape[0]}"
        )
    comp = model.components if n_components is None else model.components[:, :n_components]
    return (feats - model.mean) @ comp


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 500,
           tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Seeded k-means++ with Lloyd iterations to relative inertia tol."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = points[rng.integers(n, size=k - i)]
            break
        centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    inertia = np.inf
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        new_inertia = dists[np.arange(n), labels].sum()
        for j in range(k):
            sel = labels == j
            if np.any(sel):
                centers[j] = points[sel].mean(axis=0)
            else:
                # deterministic restart on the point farthest from its center
                far = dists[np.arange(n), labels].argmax()
                centers[j] = points[far]
        if inertia - new_inertia <= tol * max(new_inertia, 1e-300):
            inertia = new_inertia
            break
        inertia = new_inertia
    dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    return centers, labels


# ---------------------------------------------------------------------------
# Markov state models
# ---------------------------------------------------------------------------


@dataclass
class MsmModel:
    n_states: int
    lag: int
    transition_matrix: np.ndarray
    stationary: np.ndarray
    active_set: np.ndarray
    centers: np.ndarray | None = None


def stationary_distribution(transition_matrix: np.ndarray, polish_iters: int = 200) -> np.ndarray:
    """Leading left eigenvector of a row-stochastic matrix, normalized.

    Power-iteration polishing pushes the fixed-point residual to ~1e-14.
    """
    t = np.asarray(transition_matrix, dtype=np.float64)
    values, vectors = scipy.linalg.eig(t.T)
    pi = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
    pi = np.abs(pi)
    pi /= pi.sum()
    for _ in range(polish_iters):
        nxt = pi @ t
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < 1e-15:
            pi = nxt
            break
        pi = nxt
    return pi


def _largest_connected_set(counts: np.ndarray) -> np.ndarray:
    """Largest strongly connected component of the positive-count graph."""
    n = counts.shape[0]
    adj = counts > 0
    index = {}
    low = {}
    on_stack = {}
    stack: list[int] = []
    components: list[list[int]] = []
    counter = [0]

    def strongconnect(root: int) -> None:
        work = [(root, 0)]
        while work:
            v, pi = work[-1]
            if pi == 0:
                index[v] = low[v] = counter[0]
                counter[0] += 1
                stack.append(v)
                on_stack[v] = True
            advanced = False
            for w in range(pi, n):
                if not adj[v, w] or w == v:
                    continue
                if w not in index:
                    work[-1] = (v, w + 1)
                    work.append((w, 0))
                    advanced = True
                    break
                if on_stack.get(w):
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == v:
                        break
                components.append(comp)
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])

    for v in range(n):
        if v not in index:
            strongconnect(v)
    best = max(components, key=len)
    return np.array(sorted(best))


def msm_estimate(labels, lag: int, n_states: int) -> MsmModel:
    """Row-normalized sliding-window transition counts at the lag.

    `labels` is one integer array or a list of them; transitions never
    cross trajectories.  States that are never left become self-loops;
    a disconnected chain is restricted to its largest connected set
    (with a warning) and the stationary mass outside it is zero.
    """
    trajs = _as_traj_list(labels)
    counts = np.zeros((n_states, n_states))
    total = 0
    for t in trajs:
        t = np.asarray(t, dtype=int)
        if t.shape[0] > lag:
            np.add.at(counts, (t[:-lag], t[lag:]), 1.0)
            total += t.shape[0] - lag
    if total < 1:
        raise ValueError("no transition pairs at this lag")
    visited = np.where(counts.sum(axis=1) + counts.sum(axis=0) > 0)[0]
    active = _largest_connected_set(counts[np.ix_(visited, visited)])
    active = visited[active]
    if len(active) < len(visited):
        warnings.warn(
            f"count graph is disconnected; restricting to the largest set "
            f"({len(active)}/{len(visited)} visited states)",
            RuntimeWarning,
        )
    t_full = np.eye(n_states)
    sub = counts[np.ix_(active, active)].copy()
    empty = sub.sum(axis=1) == 0
    sub[empty, :] = 0.0
    sub[empty, empty] = 1.0  # states never left stay put
    sub = sub / sub.sum(axis=1, keepdims=True)
    t_full[np.ix_(active, active)] = sub
    for i in np.setdiff1d(np.arange(n_states), active):
        t_full[i] = 0.0
        t_full[i, i] = 1.0
    pi_sub = stationary_distribution(sub)
    pi = np.zeros(n_states)
    pi[active] = pi_sub
    return MsmModel(n_states=n_states, lag=lag, transition_matrix=t_full,
                    stationary=pi, active_set=active)


def reweight_histogram(values: np.ndarray, labels: np.ndarray, msm: MsmModel,
                       bins) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of an observable with frames weighted by pi(cluster)/count(cluster).

    The density is normalized to sum to 1 over the bins.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if values.shape[0] != labels.shape[0]:
        raise ValueError("observable series and labels must align")
    counts = np.bincount(labels, minlength=msm.n_states).astype(float)
    pi = msm.stationary.copy()
    missing = (counts == 0) & (pi > 0)
    if np.any(missing):
        warnings.warn(
            f"{int(missing.sum())} clusters carry stationary mass but no frames; "
            "renormalizing over populated clusters",
            RuntimeWarning,
        )
        pi[missing] = 0.0
        pi /= pi.sum()
    weights = np.where(counts[labels] > 0, pi[labels] / np.maximum(counts[labels], 1.0), 0.0)
    hist, edges = np.histogram(values, bins=bins, weights=weights)
    total = hist.sum()
    if total > 0:
        hist = hist / total
    return edges, hist


def cluster_weights_for_training(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Per-frame sampling weights for cluster-uniform enhanced sampling.

    Sampling first a cluster uniformly and then a member uniformly gives
    each frame weight 1 / (n_clusters * cluster_size); weights sum to 1.
    """
    _, labels = kmeans(points, k, seed)
    sizes = np.bincount(labels, minlength=k).astype(float)
    occupied = sizes > 0
    weights = 1.0 / (occupied.sum() * sizes[labels])
    return weights


# ---------------------------------------------------------------------------
# structural observables
# ---------------------------------------------------------------------------


def kabsch_align(mobile: np.ndarray, reference: np.ndarray):
    """Least-squares rigid superposition (proper rotations only).

    Returns (rotation, translation, aligned) with
    aligned = (mobile - mobile_mean) @ rotation.T + reference_mean.
    """
    mobile = np.asarray(mobile, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if mobile.shape != reference.shape or mobile.shape[0] < 3:
        raise ValueError("need matching coordinate sets with at least 3 points")
    mu_m = mobile.mean(axis=0)
    mu_r = reference.mean(axis=0)
    cov = (mobile - mu_m).T @ (reference - mu_r)
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise ValueError("rank-deficient covariance; rotation is not determined")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.diag([1.0, 1.0, d])
    rotation = vt.T @ corr @ u.T
    aligned = (mobile - mu_m) @ rotation.T + mu_r
    translation = mu_r - mu_m @ rotation.T
    return rotation, translation, aligned


def rmsd(coords: np.ndarray, reference: np.ndarray) -> float:
    """sqrt(mean squared deviation) of matched points, in the input units."""
    coords = np.asarray(coords, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if coords.shape != reference.shape:
        raise ValueError("coordinate sets must match")
    return float(np.sqrt(((coords - reference) ** 2).sum(axis=-1).mean()))


def gdt(coords: np.ndarray, reference: np.ndarray,
        thresholds=(1.0, 2.0, 4.0, 8.0)) -> float:
    """Mean over thresholds of the fraction of residues within that distance."""
    coords = np.asarray(coords, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if coords.shape != reference.shape:
        raise ValueError("coordinate sets must match")
    dist = np.linalg.norm(coords - reference, axis=-1)
    return float(np.mean([(dist <= t).mean() for t in thresholds]))


def radius_of_gyration(coords: np.ndarray, masses: np.ndarray | None = None) -> float:
    coords = np.asarray(coords, dtype=np.float64)
    if masses is None:
        masses = np.ones(coords.shape[0])
    masses = np.asarray(masses, dtype=np.float64)
    if masses.sum() <= 0:
        raise ValueError("total mass must be positive")
    com = (masses[:, None] * coords).sum(axis=0) / masses.sum()
    sq = ((coords - com) ** 2).sum(axis=-1)
    return float(np.sqrt((masses * sq).sum() / masses.sum()))


def _contact_pairs(n: int, min_seq_sep: int):
    iu, ju = np.triu_indices(n, k=min_seq_sep)
    return iu, ju


def fraction_native_contacts(coords: np.ndarray, reference: np.ndarray,
                             cutoff: float = 8.0, min_seq_sep: int = 3) -> float:
    """Fraction of the reference's contacts preserved in the sample.

    Contacts are anchor pairs at least `min_seq_sep` apart in sequence
    and within `cutoff` in the reference.
    """
    coords = np.asarray(coords, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if coords.shape != reference.shape:
        raise ValueError("coordinate sets must match")
    iu, ju = _contact_pairs(coords.shape[0], min_seq_sep)
    ref_d = np.linalg.norm(reference[iu] - reference[ju], axis=-1)
    native = ref_d <= cutoff
    if not np.any(native):
        raise ValueError("reference has no native contacts under this cutoff")
    d = np.linalg.norm(coords[iu] - coords[ju], axis=-1)
    return float((d[native] <= cutoff).mean())


# ---------------------------------------------------------------------------
# densities, divergences, free energies
# ---------------------------------------------------------------------------


def shared_bins(reference: np.ndarray, samples, n_bins: int = 64) -> np.ndarray:
    """Uniform bin edges spanning the union of reference and sample ranges."""
    lo = float(np.min(reference))
    hi = float(np.max(reference))
    for s in _as_traj_list(samples):
        lo = min(lo, float(np.min(s)))
        hi = max(hi, float(np.max(s)))
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats between two normalized densities."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("densities need a common binning")
    if abs(p.sum() - 1.0) > 1e-8 or abs(q.sum() - 1.0) > 1e-8:
        raise ValueError("densities must be normalized to sum 1")
    m = 0.5 * (p + q)

    def kl(a, b):
        sel = a > 0
        return float((a[sel] * np.log(a[sel] / b[sel])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def free_energy(density: np.ndarray, kT: float = 1.0) -> np.ndarray:
    """F = -kT log(density), shifted to zero at the minimum; empty bins are inf."""
    density = np.asarray(density, dtype=np.float64)
    if not np.any(density > 0):
        raise ValueError("all-empty density")
    with np.errstate(divide="ignore"):
        f = -kT * np.log(density)
    f = f - f[np.isfinite(f)].min()
    return f


# ---------------------------------------------------------------------------
# chemistry validity
# ---------------------------------------------------------------------------


def chemistry_report(atom_coords: np.ndarray, topology, vdw_radii: dict[str, float],
                     length_bins=None, angle_bins=None) -> dict:
    """Bond length/angle histograms and van der Waals clash count.

    `atom_coords` is the flat (n_atoms, 3) array in the topology's global
    atom order; a clash is a non-bonded pair closer than the sum of the
    element radii.
    """
    coords = np.asarray(atom_coords, dtype=np.float64)
    bonds = topology.bonds()
    elements = topology.atom_elements()
    n = coords.shape[0]
    if n != len(elements):
        raise ValueError("coordinate count does not match the topology")
    bi = np.array([b[0] for b in bonds])
    bj = np.array([b[1] for b in bonds])
    lengths = np.linalg.norm(coords[bi] - coords[bj], axis=-1)

    neighbors: dict[int, set[int]] = {i: set() for i in range(n)}
    for a, b in bonds:
        neighbors[a].add(b)
        neighbors[b].add(a)
    angles = []
    for center, nbrs in neighbors.items():
        nbrs = sorted(nbrs)
        for i in range(len(nbrs)):
            for j in range(i + 1, len(nbrs)):
                v1 = coords[nbrs[i]] - coords[center]
                v2 = coords[nbrs[j]] - coords[center]
                cosang = v1 @ v2 / (np.linalg.norm(v1) * np.linalg.norm(v2))
                angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    angles = np.asarray(angles)

    radii = np.array([vdw_radii[e] for e in elements])
    iu, ju = np.triu_indices(n, k=1)
    bonded = set((min(a, b), max(a, b)) for a, b in bonds)
    nb = np.array([(a, b) not in bonded for a, b in zip(iu, ju)])
    dist = np.linalg.norm(coords[iu] - coords[ju], axis=-1)
    clashes = int(np.sum(nb & (dist < radii[iu] + radii[ju])))

    if length_bins is None:
        length_bins = np.linspace(0.5, 3.0, 51)
    if angle_bins is None:
        angle_bins = np.linspace(0.0, 180.0, 37)
    lh, le = np.histogram(lengths, bins=length_bins)
    ah, ae = np.histogram(angles, bins=angle_bins)
    return {
        "bond_lengths": lengths,
        "bond_length_hist": (le, lh),
        "bond_angles": angles,
        "bond_angle_hist": (ae, ah),
        "clash_count": clashes,
        "n_bonds": len(bonds),
        "n_angles": len(angles),
    }
