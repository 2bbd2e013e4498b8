"""Acceptance suite: one test per criterion, printed pass/fail lines.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
summary lines; tolerances are pinned in the assertions.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from tensorjump import analysis as ana
from tensorjump import fileio
from tensorjump import network as net
from tensorjump import transport as tp
from tensorjump import worlds
from tensorjump.cloud import NoiseScales, TensorCloud, zeros_like
from tensorjump.irreps import (
    IrrepsSpec,
    random_rotation,
    spherical_harmonics,
    tensor_square,
    wigner_d,
)


def report(criterion: str, detail: str) -> None:
    print(f"[{criterion}] PASS  {detail}", flush=True)


SPEC = IrrepsSpec(((0, 2), (1, 2)))
VOCAB = ("A", "B", "C")


def _small_model(seed=0, layers=2):
    cfg = net.NetworkConfig(state_spec=SPEC, vocab=VOCAB, hidden_mult=4, lmax=1,
                            k_neighbors=3, layers_cond=layers, layers_header=layers,
                            radial_cutoff=4.0)
    params = net.init_params(cfg, seed=seed)
    flat = net.pack_params(params)
    jitter = 0.1 * np.random.default_rng(seed + 1).normal(size=flat.size)
    return cfg, net.unpack_params(flat + jitter, params)


def _rand_cloud(rng, n=5):
    return TensorCloud(SPEC, {0: rng.normal(size=(n, 2, 1)), 1: rng.normal(size=(n, 2, 3))},
                       rng.normal(size=(n, 3)))


def _cloud_gap(a, b):
    gap = np.abs(a.positions - b.positions).max()
    for l in a.features:
        gap = max(gap, np.abs(a.features[l] - b.features[l]).max())
    return gap


# ---------------------------------------------------------------------------
# criterion 1: equivariance suite
# ---------------------------------------------------------------------------


def test_criterion_1_equivariance_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    tol = 1e-10
    worst = {}

    # spherical harmonics, 100 random (direction, rotation) pairs
    gap = 0.0
    for _ in range(100):
        r = rng.normal(size=3)
        rot = random_rotation(rng)
        for l in (1, 2):
            lhs = spherical_harmonics(l, rot @ r)
            rhs = wigner_d(l, rot) @ spherical_harmonics(l, r)
            gap = max(gap, np.abs(lhs - rhs).max())
    worst["spherical_harmonics"] = gap

    # tensor square
    gap = 0.0
    from tensorjump.irreps import rotate_features

    for _ in range(100):
        feats = {0: rng.normal(size=(3, 2, 1)), 1: rng.normal(size=(3, 2, 3))}
        rot = random_rotation(rng)
        lhs = tensor_square(rotate_features(feats, rot))
        rhs = rotate_features(tensor_square(feats), rot)
        for l in rhs:
            gap = max(gap, np.abs(np.asarray(lhs[l]) - np.asarray(rhs[l])).max())
    worst["tensor_square"] = gap

    cfg, params = _small_model()
    si_params = params["cond"]["init"]
    conv_params = params["cond"]["blocks"]["0"]["conv"]
    labels = ["A", "B", "C", "A", "B"]

    def hidden_cloud():
        return TensorCloud(cfg.hidden_spec,
                           {0: rng.normal(size=(5, 4, 1)), 1: rng.normal(size=(5, 4, 3))},
                           rng.normal(size=(5, 3)))

    gap_si = gap_conv = gap_cond = gap_heads = 0.0
    for _ in range(100):
        rot = random_rotation(rng)
        h = hidden_cloud()
        out = net.self_interaction(h, si_params, cfg.hidden_spec, cfg)
        out_rot = net.self_interaction(h.rotated(rot), si_params, cfg.hidden_spec, cfg)
        gap_si = max(gap_si, _cloud_gap(out_rot, out.rotated(rot)))

        out = net.spatial_convolution(h, conv_params, cfg)
        out_rot = net.spatial_convolution(h.rotated(rot), conv_params, cfg)
        gap_conv = max(gap_conv, _cloud_gap(out_rot, out.rotated(rot)))

        x, xt = _rand_cloud(rng), _rand_cloud(rng)
        cond = net.condition(labels, x, params, cfg)
        cond_rot = net.condition(labels, x.rotated(rot), params, cfg)
        gap_cond = max(gap_cond, _cloud_gap(cond_rot, cond.rotated(rot)))

        drift, noise = net.heads_forward(cond, xt, 0.37, params, cfg)
        drift_r, noise_r = net.heads_forward(cond_rot, xt.rotated(rot), 0.37, params, cfg)
        gap_heads = max(gap_heads, _cloud_gap(drift_r, drift.rotated(rot)),
                        _cloud_gap(noise_r, noise.rotated(rot)))
    worst["self_interaction"] = gap_si
    worst["spatial_convolution"] = gap_conv
    worst["condition"] = gap_cond
    worst["heads_forward"] = gap_heads

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"equivariance suite took {elapsed:.1f}s (budget 60s)"
    for name, value in worst.items():
        assert value <= tol, f"{name} equivariance error {value:.2e} > 1e-10"
    report("criterion 1", "equivariance <= 1e-10 for "
           + ", ".join(f"{k}:{v:.1e}" for k, v in worst.items())
           + f" ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 2: interpolant boundary exactness
# ---------------------------------------------------------------------------


def test_criterion_2_boundary_exactness():
    rng = np.random.default_rng(11)
    x0, x1, z = _rand_cloud(rng), _rand_cloud(rng), _rand_cloud(rng)
    two = tp.make_schedule("two_sided", NoiseScales(1.0, 1.0))
    a = tp.interpolate(x0, x1, z, 0.0, two)
    b = tp.interpolate(x0, x1, z, 1.0, two)
    assert np.array_equal(a.positions, x0.positions)
    assert all(np.array_equal(a.features[l], x0.features[l]) for l in a.features)
    assert np.array_equal(b.positions, x1.positions)
    assert all(np.array_equal(b.features[l], x1.features[l]) for l in b.features)

    one = tp.make_schedule("one_sided", NoiseScales(1.0, 1.0))
    assert float(one.a1(0.0)) == 0.0 and float(one.gamma(0.0)) == 1.0
    start = tp.interpolate(x0, x1, z, 0.0, one)
    assert np.array_equal(start.positions, z.positions)
    report("criterion 2", "two-sided endpoints bitwise exact; one-sided J(0)=0, alpha(0)=1")


# ---------------------------------------------------------------------------
# criterion 3: gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    cfg = net.NetworkConfig(state_spec=SPEC, vocab=VOCAB, hidden_mult=2, lmax=1,
                            k_neighbors=2, layers_cond=1, layers_header=1,
                            radial_cutoff=4.0)
    params = net.init_params(cfg, seed=3)
    flat = net.pack_params(params)
    flat = flat + 0.1 * np.random.default_rng(4).normal(size=flat.size)
    params = net.unpack_params(flat, params)
    rng = np.random.default_rng(12)
    batch = [(["A", "B", "C"], _rand_cloud(rng, 3), _rand_cloud(rng, 3))]
    schedule = tp.make_schedule("two_sided", NoiseScales(1.0, 1.0))

    def loss_at(vec):
        p = net.unpack_params(vec, params)
        return net.loss_and_grad(p, batch, schedule, np.random.default_rng(5), cfg)[0]

    _, grad = net.loss_and_grad(params, batch, schedule, np.random.default_rng(5), cfg)
    h = 1e-6
    dir_rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        d = dir_rng.normal(size=flat.size)
        d /= np.linalg.norm(d)
        fd = (loss_at(flat + h * d) - loss_at(flat - h * d)) / (2 * h)
        an = float(grad @ d)
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-10))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-5, f"gradient vs finite differences rel err {worst:.2e}"
    assert elapsed < 120.0
    report("criterion 3", f"max relative FD error {worst:.2e} over 20 directions "
                          f"({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 4: sampler identities
# ---------------------------------------------------------------------------


def test_criterion_4_sampler_identities():
    t0 = time.perf_counter()
    cfg, params = _small_model(seed=7, layers=1)
    schedule = tp.make_schedule("two_sided", NoiseScales(1.0, 1.0))
    rng = np.random.default_rng(13)
    x, xt = _rand_cloud(rng), _rand_cloud(rng)
    cond = net.condition(["A", "B", "C", "A", "B"], x, params, cfg)
    sde = tp.sample_step_sde(cond, xt, 0.3, 0.02, params, schedule, cfg,
                             np.random.default_rng(0), eps_scale=0.0)
    ode = tp.sample_step_ode(cond, xt, 0.3, 0.02, params, schedule, cfg)
    assert np.array_equal(sde.positions, ode.positions)
    assert all(np.array_equal(sde.features[l], ode.features[l]) for l in sde.features)

    # displacement variance with zero heads: 2 eps dtau per component
    zero_params = net.init_params(cfg, seed=0)
    big = _rand_cloud(rng, n=200)
    cond_big = net.condition(["A"] * 200, big, zero_params, cfg)
    eps, dtau = 0.7, 0.025
    rng_kick = np.random.default_rng(14)
    chunks = []
    per_call = (SPEC.dim + 3) * big.n_nodes
    for _ in range(10**6 // per_call + 1):
        out = tp.sample_step_sde(cond_big, big, 0.5, dtau, zero_params, schedule, cfg,
                                 rng_kick, eps_scale=eps)
        chunks.append((out.positions - big.positions).ravel())
        chunks.append((out.features[0] - big.features[0]).ravel())
        chunks.append((out.features[1] - big.features[1]).ravel())
    flat = np.concatenate(chunks)
    ratio = flat.var() / (2 * eps * dtau)
    elapsed = time.perf_counter() - t0
    assert flat.size >= 10**6
    assert abs(ratio - 1.0) < 0.01, f"variance ratio {ratio:.4f}"
    assert elapsed < 120.0
    report("criterion 4", f"SDE(eps=0) == ODE bitwise; kick variance ratio "
                          f"{ratio:.4f} over {flat.size} draws ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 5: MSM / TICA oracles
# ---------------------------------------------------------------------------


def test_criterion_5_msm_tica_oracles():
    t0 = time.perf_counter()
    t_mat = np.array([[0.9, 0.1], [0.2, 0.8]])
    pi_exact = ana.stationary_distribution(t_mat)
    assert np.abs(pi_exact - [2 / 3, 1 / 3]).max() <= 1e-10

    rng = np.random.default_rng(15)
    n = 10**6
    states = np.zeros(n, dtype=np.int8)
    u = rng.uniform(size=n)
    cur = 0
    for i in range(1, n):
        cur = int(u[i] < t_mat[cur, 1]) if cur == 0 else int(u[i] >= t_mat[cur, 0])
        states[i] = cur
    msm = ana.msm_estimate(states.astype(int), lag=1, n_states=2)
    err = np.abs(msm.stationary - [2 / 3, 1 / 3]).max()
    assert err <= 1e-2, f"sampled-chain stationary error {err:.2e}"

    slow = np.zeros(100_000)
    fast = np.zeros(100_000)
    noise = rng.normal(size=(100_000, 2))
    for i in range(1, 100_000):
        slow[i] = 0.99 * slow[i - 1] + np.sqrt(1 - 0.99**2) * noise[i, 0]
        fast[i] = 0.5 * fast[i - 1] + np.sqrt(1 - 0.5**2) * noise[i, 1]
    feats = np.stack([slow + 0.4 * fast, 0.6 * slow - fast], axis=1)
    tica = ana.tica_fit(feats, lag=10)
    tic1 = ana.tica_project(tica, feats)[:, 0]
    cos = abs(np.corrcoef(tic1, slow)[0, 1])
    elapsed = time.perf_counter() - t0
    assert cos >= 0.99, f"TIC1 alignment |cos| = {cos:.4f}"
    assert elapsed < 120.0
    report("criterion 5", f"pi exact to {np.abs(pi_exact - [2/3, 1/3]).max():.1e}, "
                          f"sampled to {err:.1e}; TIC1 |cos| = {cos:.4f} ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 6: Brownian dynamics physics
# ---------------------------------------------------------------------------


def test_criterion_6_brownian_physics():
    t0 = time.perf_counter()

    class Harmonic1D:
        dim = 1

        def energy(self, x):
            return 0.5 * 2.0 * x[..., 0] ** 2

        def gradient(self, x):
            return 2.0 * x

    kT, k_spring = 0.8, 2.0
    walkers = 200
    steps = 10**7 // walkers
    cfg = worlds.BdConfig(dt=0.01, kT=kT, friction=1.0, steps=steps, stride=1)
    frames = worlds.simulate(Harmonic1D(), cfg, np.zeros((walkers, 1)),
                             np.random.default_rng(16))
    samples = frames[steps // 10 :].ravel()
    var_err = abs(samples.var() / (kT / k_spring) - 1.0)
    assert var_err < 0.02, f"harmonic stationary variance off by {var_err:.3f}"

    pot = worlds.DoubleWell(a=2.0, k=4.0, tilt=0.4)
    xs = np.linspace(-3.0, 3.0, 4001)
    energy = pot.a * (xs**2 - 1.0) ** 2 + pot.tilt * xs
    boltz = np.exp(-energy)
    analytic = np.trapezoid(boltz[xs < 0], xs[xs < 0]) / np.trapezoid(
        boltz[xs >= 0], xs[xs >= 0])
    cfg = worlds.BdConfig(dt=0.01, kT=1.0, friction=1.0, steps=10**5, stride=10)
    rng = np.random.default_rng(17)
    x0 = rng.normal(scale=0.4, size=(100, 3))
    x0[:50, 0] += 1.0
    x0[50:, 0] -= 1.0
    frames = worlds.simulate(pot, cfg, x0, rng)
    xs_sim = frames[frames.shape[0] // 10 :, :, 0].ravel()
    ratio = (xs_sim < 0).sum() / (xs_sim >= 0).sum()
    occ_err = abs(ratio / analytic - 1.0)
    elapsed = time.perf_counter() - t0
    assert occ_err < 0.05, f"well occupancy ratio off by {occ_err:.3f}"
    assert elapsed < 300.0
    report("criterion 6", f"harmonic variance err {var_err:.4f} (<2%); occupancy "
                          f"ratio err {occ_err:.4f} (<5%) ({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 8: observable unit oracles
# ---------------------------------------------------------------------------


def test_criterion_8_observable_unit_oracles():
    rng = np.random.default_rng(18)
    pts = rng.normal(size=(10, 3)) * 2.0
    assert ana.rmsd(pts, pts) == 0.0
    assert ana.gdt(pts, pts) == 1.0
    assert ana.fraction_native_contacts(pts, pts) == 1.0
    two_points = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert ana.radius_of_gyration(two_points) == pytest.approx(1.0)
    assert ana.js_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(
        np.log(2.0))
    fe = ana.free_energy(np.array([0.1, 0.6, 0.3]))
    assert fe[np.argmax([0.1, 0.6, 0.3])] == 0.0
    report("criterion 8", "RMSD=0, GDT=1, FNC=1, RG(2pt)=1 A, JS(disjoint)=ln 2, "
                          "free energy zero at the density mode")


# ---------------------------------------------------------------------------
# criterion 9: format and determinism
# ---------------------------------------------------------------------------


def test_criterion_9_format_and_determinism(tmp_path):
    rng = np.random.default_rng(19)
    clouds = []
    for _ in range(3):
        c = _rand_cloud(rng, 4)
        quantized = TensorCloud(
            SPEC,
            {l: c.features[l].astype(np.float32).astype(np.float64) for l in c.features},
            c.positions.astype(np.float32).astype(np.float64),
        )
        clouds.append(quantized)
    path_a = tmp_path / "a.tct"
    fileio.write_tct(path_a, fileio.tct_from_clouds(clouds, labels=("ALA", "GLY", "TRP",
                                                                    "NLE")[:4 - 1] + ("VAL",),
                                                    frame_interval=0.5))
    data = fileio.read_tct(path_a)
    path_b = tmp_path / "b.tct"
    fileio.write_tct(path_b, data)
    assert path_a.read_bytes() == path_b.read_bytes()

    cfg_text = (
        "seed = 3\nworld.steps = 200\nworld.pair_lag = 2\nworld.n_trajectories = 2\n"
        "model.hidden_mult = 4\nmodel.layers_cond = 1\nmodel.layers_header = 1\n"
        "model.k_neighbors = 1\ntrain.total_steps = 5\ntrain.batch_size = 4\n"
        "train.checkpoint_every = 5\ntrain.log_every = 5\n"
    )
    cfg_file = tmp_path / "mini.cfg"
    cfg_file.write_text(cfg_text)
    outs = []
    for tag in ("r1", "r2"):
        data_dir = tmp_path / f"data_{tag}"
        train_dir = tmp_path / f"train_{tag}"
        for cmd in (
            ["gen-data", "--config", cfg_file, "--out", data_dir],
            ["train", "--config", cfg_file, "--data", data_dir, "--out", train_dir],
        ):
            res = subprocess.run([sys.executable, "-m", "tensorjump", *map(str, cmd)],
                                 capture_output=True, text=True)
            assert res.returncode == 0, res.stderr
        blobs = {}
        for root in (data_dir, train_dir):
            for name in sorted(os.listdir(root)):
                full = os.path.join(root, name)
                if os.path.isfile(full):
                    with open(full, "rb") as fh:
                        blobs[name] = fh.read()
        outs.append(blobs)
    assert outs[0].keys() == outs[1].keys()
    for name in outs[0]:
        if name == "loss_log.csv":
            # wall-clock column differs; compare the numeric columns
            rows = [b.decode().splitlines() for b in (outs[0][name], outs[1][name])]
            for ra, rb in zip(*rows):
                assert ra.rsplit(",", 1)[0] == rb.rsplit(",", 1)[0]
        else:
            assert outs[0][name] == outs[1][name], f"{name} not byte-reproducible"
    report("criterion 9", "TCT round trip bit-exact; gen-data and train "
                          "byte-reproducible under a fixed seed")
