"""Brownian dynamics physics and the world/protein encodings."""

import numpy as np
import pytest

from tensorjump import worlds
from tensorjump.irreps import random_rotation
from tensorjump.worlds import (
    BdConfig,
    DoubleWell,
    GaussianMixture3D,
    HarmonicChain,
    ProteinTopology,
    bd_step,
    decode_protein,
    encode_protein,
    generate_dataset,
    simulate,
)


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("pot", [
    DoubleWell(a=2.0, k=4.0, tilt=0.3),
    HarmonicChain(n_beads=3, k=2.0, r0=1.0),
    GaussianMixture3D(centers=((0, 0, 0), (2.0, 0, 0)), weights=(1.0, 0.5),
                      widths=(0.8, 1.2)),
])
def test_gradient_matches_finite_differences(pot):
    rng = np.random.default_rng(0)
    x = rng.normal(size=pot.dim) * 0.7
    g = pot.gradient(x)
    h = 1e-6
    for i in range(pot.dim):
        e = np.zeros(pot.dim)
        e[i] = h
        fd = (pot.energy(x + e) - pot.energy(x - e)) / (2 * h)
        np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-8)


def test_potentials_vectorize_over_walkers():
    pot = DoubleWell()
    x = np.random.default_rng(1).normal(size=(10, 3))
    assert pot.energy(x).shape == (10,)
    assert pot.gradient(x).shape == (10, 3)


# ---------------------------------------------------------------------------
# Brownian steps
# ---------------------------------------------------------------------------


class _FlatPotential:
    dim = 2

    def gradient(self, x):
        return np.zeros_like(x)

    def energy(self, x):
        return np.zeros(x.shape[:-1])


def test_pure_diffusion_displacement_variance():
    # grad E = 0, R = I: variance per coordinate = 2 kT dt (1% over ~2e6 draws)
    cfg = BdConfig(dt=0.01, kT=1.3, friction=1.0, steps=1, stride=1)
    rng = np.random.default_rng(2)
    x = np.zeros((10**6, 2))
    out = bd_step(x, _FlatPotential(), cfg, rng)
    var = (out - x).var()
    assert abs(var / (2 * cfg.kT * cfg.dt) - 1.0) < 0.01


def test_fluctuation_dissipation_with_diagonal_friction():
    # displacement covariance is 2 kT R^-1 dt per coordinate
    friction = np.array([1.0, 4.0])
    cfg = BdConfig(dt=0.02, kT=0.7, friction=friction, steps=1, stride=1)
    rng = np.random.default_rng(3)
    x = np.zeros((10**6, 2))
    delta = bd_step(x, _FlatPotential(), cfg, rng) - x
    for i in range(2):
        expect = 2 * cfg.kT * cfg.dt / friction[i]
        assert abs(delta[:, i].var() / expect - 1.0) < 0.01


def test_zero_temperature_descends_energy():
    pot = DoubleWell(a=2.0, k=4.0)
    cfg = BdConfig(dt=1e-3, kT=1e-300, friction=1.0, steps=1, stride=1)
    rng = np.random.default_rng(4)
    x = np.array([0.4, 0.8, -0.3])
    energies = [float(pot.energy(x))]
    for _ in range(200):
        x = bd_step(x, pot, cfg, rng)
        energies.append(float(pot.energy(x)))
    diffs = np.diff(energies)
    assert np.all(diffs <= 1e-12)


class _Harmonic1D:
    dim = 1

    def __init__(self, k):
        self.k = k

    def energy(self, x):
        return 0.5 * self.k * x[..., 0] ** 2

    def gradient(self, x):
        return self.k * x


def test_harmonic_stationary_variance():
    # long-run sample variance -> kT / k within 2% over 1e7 total steps
    k, kT, dt = 2.0, 0.9, 0.01
    walkers = 200
    steps = 10**7 // walkers
    cfg = BdConfig(dt=dt, kT=kT, friction=1.0, steps=steps, stride=1)
    rng = np.random.default_rng(5)
    frames = simulate(_Harmonic1D(k), cfg, np.zeros((walkers, 1)), rng)
    burn = steps // 10
    samples = frames[burn:].ravel()
    # the Euler chain has stationary variance kT/k * (1 - k dt / 2)^-1 ~ kT/k
    assert abs(samples.var() / (kT / k) - 1.0) < 0.02


def test_symmetric_double_well_histogram_symmetry():
    pot = DoubleWell(a=2.0, k=4.0, tilt=0.0)
    walkers = 100
    cfg = BdConfig(dt=0.01, kT=1.0, friction=1.0, steps=10**5, stride=10)
    rng = np.random.default_rng(6)
    x0 = rng.normal(scale=0.4, size=(walkers, 3))
    x0[: walkers // 2, 0] += 1.0
    x0[walkers // 2 :, 0] -= 1.0
    frames = simulate(pot, cfg, x0, rng)
    xs = frames[frames.shape[0] // 10 :, :, 0].ravel()
    # Kolmogorov-Smirnov distance between x and -x samples
    grid = np.linspace(-2.5, 2.5, 201)
    cdf_a = np.searchsorted(np.sort(xs), grid) / xs.size
    cdf_b = np.searchsorted(np.sort(-xs), grid) / xs.size
    assert np.abs(cdf_a - cdf_b).max() < 0.02


def test_double_well_occupancy_matches_boltzmann_quadrature():
    # tilted double well: analytic well weights from direct quadrature
    pot = DoubleWell(a=2.0, k=4.0, tilt=0.4)
    kT = 1.0
    xs = np.linspace(-3.0, 3.0, 4001)
    energy_1d = pot.a * (xs**2 - 1.0) ** 2 + pot.tilt * xs
    boltz = np.exp(-energy_1d / kT)
    left = np.trapezoid(boltz[xs < 0], xs[xs < 0])
    right = np.trapezoid(boltz[xs >= 0], xs[xs >= 0])
    analytic_ratio = left / right

    walkers = 100
    cfg = BdConfig(dt=0.01, kT=kT, friction=1.0, steps=10**5, stride=10)
    rng = np.random.default_rng(7)
    x0 = rng.normal(scale=0.4, size=(walkers, 3))
    x0[: walkers // 2, 0] += 1.0
    x0[walkers // 2 :, 0] -= 1.0
    frames = simulate(pot, cfg, x0, rng)
    xs_sim = frames[frames.shape[0] // 10 :, :, 0].ravel()
    ratio = (xs_sim < 0).sum() / max((xs_sim >= 0).sum(), 1)
    assert abs(ratio / analytic_ratio - 1.0) < 0.05


def test_nonfinite_state_raises():
    cfg = BdConfig(dt=0.01, steps=1)
    with pytest.raises(FloatingPointError):
        bd_step(np.array([np.nan, 0.0]), _FlatPotential(), cfg, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def test_generate_dataset_rejects_zero_lag():
    with pytest.raises(ValueError, match="pair_lag"):
        generate_dataset(DoubleWell(), BdConfig(steps=10), 2, 0,
                         np.random.default_rng(0))


def test_generate_dataset_pair_bookkeeping():
    cfg = BdConfig(dt=0.01, steps=20, stride=2)
    ds = generate_dataset(DoubleWell(), cfg, 3, 4, np.random.default_rng(1))
    frames = ds.states.shape[1]
    assert frames == 11  # initial + 10 strided
    assert len(ds) == 3 * (frames - 4)
    labels, x0, x1 = ds.pair_clouds(0)
    assert labels == ("PARTICLE", "ANCHOR")
    assert x0.n_nodes == 2
    np.testing.assert_allclose(ds.world.decode(x0), ds.states[0, 0])
    np.testing.assert_allclose(ds.world.decode(x1), ds.states[0, 4])


def test_particle_anchor_encode_decode_roundtrip():
    world = worlds.ParticleAnchorWorld(DoubleWell())
    state = np.array([0.7, -1.2, 0.4])
    cloud = world.encode(state)
    np.testing.assert_allclose(world.decode(cloud), state)
    np.testing.assert_array_equal(cloud.positions[1], 0.0)
    assert cloud.features == {}  # pure geometry: nothing transported but positions
    cond = world.conditioning(cloud)
    np.testing.assert_array_equal(cond.features[1][0], [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(cond.positions, cloud.positions)
    renewed = world.renew(cloud)
    np.testing.assert_allclose(world.decode(renewed), state)


def test_chain_world_roundtrip():
    pot = HarmonicChain(n_beads=4)
    world = worlds.ChainWorld(pot)
    state = np.random.default_rng(2).normal(size=pot.dim)
    np.testing.assert_allclose(world.decode(world.encode(state)), state)


# ---------------------------------------------------------------------------
# protein representation
# ---------------------------------------------------------------------------


def _fake_coords(topology, rng):
    coords = []
    for count in topology.atom_counts():
        ca = rng.normal(scale=5.0, size=3)
        atoms = np.vstack([ca, ca + rng.normal(scale=1.5, size=(count, 3))])
        coords.append(atoms)
    return coords


def test_topology_vocabulary_and_slots():
    assert len(worlds.RESIDUE_VOCAB) == 21  # 20 standard residues + NLE
    assert "NLE" in worlds.RESIDUE_VOCAB
    counts = {r: len(a) for r, a in worlds.RESIDUE_ATOMS.items()}
    assert counts["GLY"] == 3
    assert counts["TRP"] == 13  # the slot count ceiling
    assert max(counts.values()) == worlds.MAX_SIDE_SLOTS


def test_unknown_residue_rejected():
    with pytest.raises(ValueError, match="unknown residue"):
        ProteinTopology(("ALA", "XYZ"))


def test_glycine_slots_masked():
    topo = ProteinTopology(("GLY",))
    mask = topo.channel_mask()[1]
    assert mask[0, :3].all() and not mask[0, 3:].any()
    coords = _fake_coords(topo, np.random.default_rng(3))
    cloud = encode_protein(topo, coords)
    np.testing.assert_array_equal(cloud.features[1][0, 3:], 0.0)


def test_encode_decode_roundtrip_exact():
    topo = ProteinTopology(("MET", "GLY", "TRP", "ALA", "NLE"))
    rng = np.random.default_rng(4)
    coords = _fake_coords(topo, rng)
    cloud = encode_protein(topo, coords)
    back = decode_protein(cloud, topo)
    for a, b in zip(coords, back):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_encode_atom_count_mismatch():
    topo = ProteinTopology(("ALA",))
    with pytest.raises(ValueError, match="expects"):
        encode_protein(topo, [np.zeros((3, 3))])


def test_encode_rotation_consistency():
    topo = ProteinTopology(("LEU", "SER"))
    rng = np.random.default_rng(5)
    coords = _fake_coords(topo, rng)
    rot = random_rotation(rng)
    rotated_coords = [c @ rot.T for c in coords]
    direct = encode_protein(topo, rotated_coords)
    via_cloud = encode_protein(topo, coords).rotated(rot)
    np.testing.assert_allclose(direct.positions, via_cloud.positions, atol=1e-12)
    np.testing.assert_allclose(direct.features[1], via_cloud.features[1], atol=1e-12)


def test_decode_translation():
    from tensorjump.cloud import centroid, recenter

    topo = ProteinTopology(("ALA", "VAL", "PHE"))
    rng = np.random.default_rng(6)
    coords = _fake_coords(topo, rng)
    cloud = encode_protein(topo, coords)
    shift = centroid(cloud)
    moved = decode_protein(recenter(cloud), topo)
    for a, b in zip(coords, moved):
        np.testing.assert_allclose(b, a - shift, atol=1e-12)


def test_zero_offsets_put_atoms_at_anchor():
    topo = ProteinTopology(("ALA",))
    cloud = encode_protein(topo, [np.vstack([np.ones(3)] * 5)])
    out = decode_protein(cloud, topo)[0]
    np.testing.assert_array_equal(out, np.ones((5, 3)))


def test_bond_table_connectivity():
    topo = ProteinTopology(("ALA", "GLY"))
    bonds = topo.bonds()
    n_atoms = sum(1 + c for c in topo.atom_counts())
    assert all(0 <= a < n_atoms and 0 <= b < n_atoms for a, b in bonds)
    # ALA: 4 internal bonds, GLY: 3, plus 1 peptide bond
    assert len(bonds) == 4 + 3 + 1
    elements = topo.atom_elements()
    assert elements[:5] == ["C", "N", "C", "O", "C"]  # CA N C O CB
