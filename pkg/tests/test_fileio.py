"""Binary container round trips and corruption detection."""

import numpy as np
import pytest

from tensorjump import fileio
from tensorjump.cloud import TensorCloud
from tensorjump.irreps import IrrepsSpec
from tensorjump.network import NetworkConfig, init_params, pack_params
from tensorjump.cloud import NoiseScales

SPEC = IrrepsSpec(((0, 2), (1, 3)))


def make_clouds(rng, n_frames=4, n=3, mask=None):
    out = []
    for _ in range(n_frames):
        feats = {l: rng.normal(size=(n, h, 2 * l + 1)).astype(np.float32).astype(np.float64)
                 for l, h in SPEC.entries}
        pos = rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64)
        out.append(TensorCloud(SPEC, feats, pos, mask))
    return out


def test_tct_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    clouds = make_clouds(rng)
    labels = ("ALA", "GLY", "TRP")
    path = tmp_path / "a.tct"
    fileio.write_tct(path, fileio.tct_from_clouds(clouds, labels=labels, frame_interval=0.25))
    data = fileio.read_tct(path)
    assert data.labels == labels
    assert data.frame_interval == 0.25
    assert data.spec == SPEC
    for t, cloud in enumerate(clouds):
        np.testing.assert_array_equal(data.positions[t], cloud.positions)
        for l in cloud.features:
            np.testing.assert_array_equal(data.features[l][t], cloud.features[l])
    # write -> read -> write produces identical bytes
    path2 = tmp_path / "b.tct"
    fileio.write_tct(path2, data)
    assert path.read_bytes() == path2.read_bytes()


def test_tct_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    mask = {0: np.array([[True, False]] * 3), 1: np.ones((3, 3), dtype=bool)}
    clouds = make_clouds(rng, mask=mask)
    path = tmp_path / "m.tct"
    fileio.write_tct(path, fileio.tct_from_clouds(clouds))
    data = fileio.read_tct(path)
    assert data.mask is not None
    np.testing.assert_array_equal(data.mask[0], mask[0])
    np.testing.assert_array_equal(data.mask[1], mask[1])
    assert data.labels is None


def test_tct_empty_trajectory(tmp_path):
    path = tmp_path / "empty.tct"
    empty = fileio.tct_from_clouds([], labels=("PARTICLE", "ANCHOR"), frame_interval=1.0,
                                   spec=SPEC, n_nodes=2)
    fileio.write_tct(path, empty)
    data = fileio.read_tct(path)
    assert data.n_frames == 0
    assert data.n_nodes == 2
    assert data.labels == ("PARTICLE", "ANCHOR")


def test_tct_checksum_detects_corruption(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "c.tct"
    fileio.write_tct(path, fileio.tct_from_clouds(make_clouds(rng)))
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(fileio.FormatError, match="checksum"):
        fileio.read_tct(path)


def test_tct_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.tct"
    path.write_bytes(b"not a trajectory at all")
    with pytest.raises(fileio.FormatError, match="not a tensor-cloud"):
        fileio.read_tct(path)


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetworkConfig(state_spec=SPEC, vocab=("ALA", "GLY"), hidden_mult=3, lmax=1,
                        k_neighbors=2, layers_cond=1, layers_header=1)
    params = init_params(cfg, seed=0)
    flat = pack_params(params)
    doc = fileio.config_to_json(cfg, "two_sided", NoiseScales(1.0, 3.0))
    path = tmp_path / "ck.tjck"
    opt = {"m": np.ones_like(flat), "v": 2 * np.ones_like(flat), "step": 17}
    fileio.write_checkpoint(path, doc, flat, opt_state=opt)
    ck = fileio.read_checkpoint(path)
    cfg2, kind, scales, _ = fileio.config_from_json(ck["config_json"])
    assert cfg2 == cfg
    assert kind == "two_sided"
    assert scales.var_positions == 3.0
    np.testing.assert_allclose(ck["params"], flat.astype(np.float32))
    np.testing.assert_array_equal(ck["resume"]["params"], flat)  # f64 exact
    np.testing.assert_array_equal(ck["resume"]["m"], opt["m"])
    assert ck["resume"]["step"] == 17


def test_checkpoint_checksum(tmp_path):
    path = tmp_path / "ck.tjck"
    fileio.write_checkpoint(path, "{}", np.arange(5.0))
    blob = bytearray(path.read_bytes())
    blob[10] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(fileio.FormatError, match="checksum"):
        fileio.read_checkpoint(path)


def test_pair_index_roundtrip(tmp_path):
    entries = [("traj_000.tct", 0, 4), ("traj_001.tct", 7, 4)]
    path = tmp_path / "pairs.csv"
    fileio.write_pair_index(path, entries)
    assert fileio.read_pair_index(path) == entries


def test_label_registry_covers_worlds():
    for name in ("ALA", "NLE", "PARTICLE", "ANCHOR", "BEAD"):
        assert name in fileio.LABEL_REGISTRY
    assert len(fileio.LABEL_REGISTRY) < 0xFF
