"""Command-line pipeline: determinism, formats, degraded modes."""

import os
import subprocess
import sys

import numpy as np
import pytest

from tensorjump import fileio

BASE_CFG = """
seed = 5
world.kind = double_well
world.dt = 0.01
world.steps = 400
world.stride = 1
world.n_trajectories = 2
world.pair_lag = 2
world.reference_steps = 4000
world.reference_walkers = 4
world.reference_stride = 5
model.hidden_mult = 4
model.lmax = 1
model.k_neighbors = 1
model.layers_cond = 1
model.layers_header = 1
model.radial_cutoff = 6.0
schedule.sigma_p = 1.0
train.batch_size = 8
train.total_steps = 30
train.lr_start = 0.003
train.lr_end = 0.001
train.decay_steps = 30
train.checkpoint_every = 15
train.log_every = 10
sample.steps = 4
sample.eps = 0.3
sample.n_trajectories = 3
sample.n_steps = 12
analysis.tica_lag = 0.2
analysis.msm_lag = 0.08
analysis.n_clusters = 5
analysis.n_bins = 16
"""


def run_cli(*args, check=True):
    cmd = [sys.executable, "-m", "tensorjump", *map(str, args)]
    out = subprocess.run(cmd, capture_output=True, text=True)
    if check and out.returncode != 0:
        raise AssertionError(f"command failed: {' '.join(cmd)}\n{out.stdout}\n{out.stderr}")
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(BASE_CFG)
    data = root / "data"
    run_cli("gen-data", "--config", cfg, "--out", data)
    train = root / "train"
    run_cli("train", "--config", cfg, "--data", data, "--out", train)
    return {"root": root, "cfg": cfg, "data": data, "train": train}


def _dir_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if os.path.isfile(full):
            with open(full, "rb") as fh:
                out[name] = fh.read()
    return out


def test_gen_data_outputs(workspace):
    data = workspace["data"]
    files = sorted(os.listdir(data))
    assert "pair_index.csv" in files and "traj_000.tct" in files
    index = fileio.read_pair_index(data / "pair_index.csv")
    traj = fileio.read_tct(data / "traj_000.tct")
    # pairs count = trajectories * (frames - lag)
    assert len(index) == 2 * (traj.n_frames - 2)
    assert traj.labels == ("PARTICLE", "ANCHOR")
    ref_files = sorted(os.listdir(data / "reference"))
    assert len(ref_files) == 4


def test_gen_data_deterministic(workspace, tmp_path):
    again = tmp_path / "data2"
    run_cli("gen-data", "--config", workspace["cfg"], "--out", again)
    ours = _dir_bytes(workspace["data"])
    theirs = _dir_bytes(again)
    assert ours.keys() == theirs.keys()
    for name in ours:
        assert ours[name] == theirs[name], f"{name} differs between identical runs"


def test_gen_data_zero_steps(tmp_path):
    cfg = tmp_path / "z.cfg"
    cfg.write_text(BASE_CFG.replace("world.steps = 400", "world.steps = 0"))
    out = tmp_path / "zout"
    run_cli("gen-data", "--config", cfg, "--out", out)
    data = fileio.read_tct(out / "traj_000.tct")
    assert data.n_frames == 0
    assert data.n_nodes == 2
    assert fileio.read_pair_index(out / "pair_index.csv") == []


def test_train_outputs_and_roundtrip(workspace):
    train = workspace["train"]
    ck = fileio.read_checkpoint(train / "checkpoint.tjck")
    assert ck["resume"]["step"] == 30
    log = (train / "loss_log.csv").read_text().strip().splitlines()
    assert log[0] == "step,loss,lr,seconds"
    steps = [int(row.split(",")[0]) for row in log[1:]]
    assert steps == [10, 20, 30]


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    cfg_short = tmp_path / "short.cfg"
    cfg_short.write_text(BASE_CFG.replace("train.total_steps = 30", "train.total_steps = 15"))
    short = tmp_path / "short"
    run_cli("train", "--config", cfg_short, "--data", workspace["data"], "--out", short)
    resumed = tmp_path / "resumed"
    run_cli("train", "--config", workspace["cfg"], "--data", workspace["data"],
            "--out", resumed, "--resume", short / "checkpoint.tjck")
    a = (workspace["train"] / "checkpoint.tjck").read_bytes()
    b = (resumed / "checkpoint.tjck").read_bytes()
    assert a == b


def test_train_resume_config_mismatch(workspace, tmp_path):
    cfg_other = tmp_path / "other.cfg"
    cfg_other.write_text(BASE_CFG.replace("model.hidden_mult = 4", "model.hidden_mult = 8"))
    out = run_cli("train", "--config", cfg_other, "--data", workspace["data"],
                  "--out", tmp_path / "x", "--resume",
                  workspace["train"] / "checkpoint.tjck", check=False)
    assert out.returncode != 0
    assert "configuration differs" in out.stderr


def test_sample_deterministic_and_overrides(workspace, tmp_path):
    ck = workspace["train"] / "checkpoint.tjck"
    start = workspace["data"] / "traj_000.tct"
    a = tmp_path / "sa"
    b = tmp_path / "sb"
    run_cli("sample", "--config", workspace["cfg"], "--checkpoint", ck, "--start", start,
            "--out", a)
    run_cli("sample", "--config", workspace["cfg"], "--checkpoint", ck, "--start", start,
            "--out", b)
    assert _dir_bytes(a) == _dir_bytes(b)
    # eps and dtau-steps flags override the config and change the output
    c = tmp_path / "sc"
    run_cli("sample", "--config", workspace["cfg"], "--checkpoint", ck, "--start", start,
            "--out", c, "--eps", "0.25", "--dtau-steps", "7")
    assert _dir_bytes(a) != _dir_bytes(c)
    traj = fileio.read_tct(a / "sample_000.tct")
    assert traj.n_frames == 13  # start frame + 12 sampled steps


def test_sample_zero_steps_copies_start(workspace, tmp_path):
    ck = workspace["train"] / "checkpoint.tjck"
    start = workspace["data"] / "traj_000.tct"
    out = tmp_path / "zero"
    run_cli("sample", "--config", workspace["cfg"], "--checkpoint", ck, "--start", start,
            "--out", out, "--n-steps", "0")
    data = fileio.read_tct(out / "sample_000.tct")
    src = fileio.read_tct(start)
    assert data.n_frames == 1
    np.testing.assert_array_equal(data.positions[0], src.positions[0])


def test_analyze_reference_against_itself(workspace, tmp_path):
    out = tmp_path / "self"
    run_cli("analyze", "--config", workspace["cfg"], "--reference",
            workspace["data"] / "reference", "--out", out,
            workspace["data"] / "reference")
    report = (out / "report.txt").read_text()
    assert "TIC1" in report and "RG" in report
    # identical pipelines on identical data: JS exactly zero
    for line in report.splitlines():
        if line.startswith(("TIC1", "TIC2", "RG")):
            assert "0.0000" in line
        if line.startswith(("RMSD", "GDT", "FNC")):
            assert "n/a" in line  # no crystal reference configured
    assert (out / "hist_TIC1.dat").exists()
    assert (out / "fe_RG.dat").exists()


def test_analyze_samples_and_determinism(workspace, tmp_path):
    ck = workspace["train"] / "checkpoint.tjck"
    start = workspace["data"] / "traj_000.tct"
    samples = tmp_path / "samples"
    run_cli("sample", "--config", workspace["cfg"], "--checkpoint", ck, "--start", start,
            "--out", samples)
    a = tmp_path / "ana_a"
    b = tmp_path / "ana_b"
    for out in (a, b):
        run_cli("analyze", "--config", workspace["cfg"], "--reference",
                workspace["data"] / "reference", "--out", out, samples)
    assert _dir_bytes(a) == _dir_bytes(b)


def test_compare_transports_single_kind(workspace, tmp_path):
    out = tmp_path / "cmp"
    cfg2 = tmp_path / "cmp.cfg"
    cfg2.write_text(BASE_CFG + "compare.sigma_p_grid = 1.0\n"
                               "sample.n_trajectories = 2\nsample.n_steps = 12\n")
    run_cli("compare-transports", "--config", cfg2, "--data", workspace["data"],
            "--start", workspace["data"] / "traj_000.tct",
            "--reference", workspace["data"] / "reference",
            "--out", out, "--kind", "two_sided")
    report = (out / "report.txt").read_text()
    assert "two_sided_sp1" in report


def test_sweep_grid(workspace, tmp_path):
    out = tmp_path / "sweep"
    cfg2 = tmp_path / "sweep.cfg"
    cfg2.write_text(BASE_CFG + "sweep.eps_grid = 0.5, 10.0\nsweep.steps_grid = 3\n"
                               "sweep.n_trajectories = 2\nsweep.n_steps = 12\n")
    run_cli("sweep", "--config", cfg2, "--checkpoint",
            workspace["train"] / "checkpoint.tjck",
            "--start", workspace["data"] / "traj_000.tct",
            "--reference", workspace["data"] / "reference", "--out", out)
    table = (out / "sweep_table.txt").read_text().strip().splitlines()
    assert len(table) == 3  # header + two grid points
    assert (out / "report.txt").exists()


def test_unknown_config_key_fails(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("world.answer = 42\n")
    out = run_cli("gen-data", "--config", cfg, "--out", tmp_path / "x", check=False)
    assert out.returncode != 0


def test_analyze_protein_observables_and_chemistry(tmp_path):
    # synthetic all-atom trajectories around a compact fold
    from tensorjump import worlds
    from tensorjump.fileio import tct_from_clouds, write_tct

    labels = ("MET", "ALA", "GLY", "VAL", "LEU", "SER")
    topo = worlds.ProteinTopology(labels)
    rng = np.random.default_rng(0)
    crystal_coords = []
    radius = len(labels) * 3.8 / (2 * np.pi)  # compact ring fold: contacts exist
    for i, count in enumerate(topo.atom_counts()):
        angle = 2 * np.pi * i / len(labels)
        ca = radius * np.array([np.cos(angle), np.sin(angle), 0.0])
        atoms = [ca]
        for j in range(count):
            d = rng.normal(size=3)
            atoms.append(ca + 1.5 * d / np.linalg.norm(d))
        crystal_coords.append(np.asarray(atoms))

    def jitter_frames(n, scale, seed):
        local = np.random.default_rng(seed)
        frames = []
        for _ in range(n):
            coords = [c + scale * local.normal(size=c.shape) for c in crystal_coords]
            frames.append(worlds.encode_protein(topo, coords))
        return frames

    crystal = tmp_path / "crystal.tct"
    write_tct(crystal, tct_from_clouds(jitter_frames(1, 0.0, 1), labels=labels))
    ref = tmp_path / "ref.tct"
    write_tct(ref, tct_from_clouds(jitter_frames(60, 0.3, 2), labels=labels,
                                   frame_interval=1.0))
    samples = tmp_path / "samples.tct"
    write_tct(samples, tct_from_clouds(jitter_frames(60, 0.35, 3), labels=labels,
                                       frame_interval=1.0))

    cfg = tmp_path / "protein.cfg"
    cfg.write_text(
        "analysis.featurization = ca_distances\n"
        "analysis.tica_lag = 1.0\nanalysis.msm_lag = 2.0\n"
        "analysis.n_clusters = 4\nanalysis.n_bins = 24\n"
        f"analysis.crystal = {crystal.name}\n"
        "analysis.chemistry = true\n"
    )
    out = tmp_path / "ana"
    run_cli("analyze", "--config", cfg, "--reference", ref, "--out", out, samples)
    report = (out / "report.txt").read_text()
    for obs in ("RMSD", "GDT", "FNC", "RG"):
        line = next(l for l in report.splitlines() if l.startswith(obs))
        assert "n/a" not in line, f"{obs} should be computed with a crystal reference"
    chem = (out / "chemistry.txt").read_text()
    assert "total clashes" in chem
    assert (out / "fe_RMSD.dat").exists()
