"""On-disk formats: the tensor-cloud trajectory container and checkpoints.

TCT layout (all little-endian, trailing 8-byte blake2b checksum):

    magic "TCTR" | version u32 | n_nodes u32 | lmax u8
    multiplicity u32 per degree 0..lmax (0 = degree absent)
    frame_count u64 | frame_interval f64
    node labels u8 * N (index into LABEL_REGISTRY, 0xFF = none)
    channel masks u8, node-major then degree then channel (1 = live slot)
    frames: per frame, per node: position 3*f32,
            then features degree-major channel-major (2l+1)*f32

Checkpoints store a JSON header (model/schedule configuration and a
configuration hash), the parameter vector as f32, and an f64 resume
section (parameters plus optimizer moments) so an interrupted run
continues bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .cloud import NoiseScales, TensorCloud
from .irreps import IrrepsSpec
from .network import NetworkConfig
from .worlds import RESIDUE_VOCAB

TCT_MAGIC = b"TCTR"
CKPT_MAGIC = b"TJCK"
FORMAT_VERSION = 1

# u8 label codes: the 21 canonical residues first, then the toy-world labels
LABEL_REGISTRY: tuple[str, ...] = RESIDUE_VOCAB + ("ANCHOR", "BEAD", "PARTICLE")
_LABEL_CODE = {name: i for i, name in enumerate(LABEL_REGISTRY)}
LABEL_NONE = 0xFF


class FormatError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


@dataclass
class TctData:
    """In-memory image of a trajectory file."""

    spec: IrrepsSpec
    labels: tuple[str, ...] | None
    frame_interval: float
    positions: np.ndarray  # (T, N, 3)
    features: dict[int, np.ndarray]  # degree -> (T, N, H, 2l+1)
    mask: dict[int, np.ndarray] | None = None

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[1]

    def cloud(self, t: int) -> TensorCloud:
        return TensorCloud(
            self.spec,
            {l: self.features[l][t] for l in self.features},
            self.positions[t],
            self.mask,
        )

    def clouds(self) -> list[TensorCloud]:
        return [self.cloud(t) for t in range(self.n_frames)]


def tct_from_clouds(clouds: list[TensorCloud], labels=None, frame_interval: float = 1.0,
                    spec: IrrepsSpec | None = None, n_nodes: int | None = None) -> TctData:
    """Stack clouds into a file image; spec/n_nodes cover the empty case."""
    if clouds:
        spec = clouds[0].spec
        n_nodes = clouds[0].n_nodes
    elif spec is None or n_nodes is None:
        raise FormatError("empty trajectories need an explicit spec and node count")
    positions = (np.stack([c.positions for c in clouds]) if clouds
                 else np.zeros((0, n_nodes, 3)))
    features = {
        l: (np.stack([c.features[l] for c in clouds]) if clouds
            else np.zeros((0, n_nodes, h, 2 * l + 1)))
        for l, h in spec.entries
    }
    return TctData(spec, tuple(labels) if labels is not None else None,
                   frame_interval, positions, features, clouds[0].mask if clouds else None)


def write_tct(path, data: TctData) -> None:
    buf = io.BytesIO()
    spec = data.spec
    n = data.n_nodes
    lmax = spec.lmax if spec.entries else 0
    buf.write(TCT_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", n))
    buf.write(struct.pack("<B", lmax))
    for l in range(lmax + 1):
        buf.write(struct.pack("<I", spec.mult(l)))
    buf.write(struct.pack("<Q", data.n_frames))
    buf.write(struct.pack("<d", float(data.frame_interval)))
    if data.labels is None:
        buf.write(bytes([LABEL_NONE]) * n)
    else:
        if len(data.labels) != n:
            raise FormatError("one label per node is required")
        try:
            buf.write(bytes(_LABEL_CODE[x] for x in data.labels))
        except KeyError as exc:
            raise FormatError(f"label {exc.args[0]!r} is not in the registry") from exc
    for i in range(n):
        for l in range(lmax + 1):
            h = spec.mult(l)
            if h == 0:
                continue
            if data.mask is None:
                buf.write(b"\x01" * h)
            else:
                buf.write(bytes(int(v) for v in data.mask[l][i]))
    for t in range(data.n_frames):
        frame = io.BytesIO()
        for i in range(n):
            frame.write(data.positions[t, i].astype("<f4").tobytes())
            for l in range(lmax + 1):
                if spec.mult(l):
                    frame.write(data.features[l][t, i].astype("<f4").tobytes())
        buf.write(frame.getvalue())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


def read_tct(path) -> TctData:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != TCT_MAGIC:
        raise FormatError(f"{path}: not a tensor-cloud trajectory file")
    payload, digest = blob[:-8], blob[-8:]
    if _checksum(payload) != digest:
        raise FormatError(f"{path}: checksum mismatch (corrupted file)")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off); off += 4
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack_from("<I", payload, off); off += 4
    (lmax,) = struct.unpack_from("<B", payload, off); off += 1
    mults = []
    for _ in range(lmax + 1):
        (h,) = struct.unpack_from("<I", payload, off); off += 4
        mults.append(h)
    (n_frames,) = struct.unpack_from("<Q", payload, off); off += 8
    (frame_interval,) = struct.unpack_from("<d", payload, off); off += 8
    codes = payload[off : off + n]; off += n
    if all(c == LABEL_NONE for c in codes):
        labels = None
    else:
        try:
            labels = tuple(LABEL_REGISTRY[c] for c in codes)
        except IndexError:
            raise FormatError(f"{path}: unknown label code") from None
    spec = IrrepsSpec(tuple((l, h) for l, h in enumerate(mults) if h))
    mask: dict[int, np.ndarray] = {l: np.zeros((n, h), dtype=bool) for l, h in spec.entries}
    for i in range(n):
        for l, h in spec.entries:
            row = payload[off : off + h]; off += h
            mask[l][i] = np.frombuffer(row, dtype=np.uint8).astype(bool)
    if all(m.all() for m in mask.values()):
        mask = None
    positions = np.zeros((n_frames, n, 3))
    features = {l: np.zeros((n_frames, n, h, 2 * l + 1)) for l, h in spec.entries}
    frame_floats = n * (3 + sum(h * (2 * l + 1) for l, h in spec.entries))
    need = off + 4 * frame_floats * n_frames + 0
    if len(payload) != need:
        raise FormatError(f"{path}: truncated or oversized payload")
    if n_frames:
        raw = np.frombuffer(payload, dtype="<f4", count=frame_floats * n_frames, offset=off)
        raw = raw.astype(np.float64).reshape(n_frames, n, frame_floats // n)
        positions[:] = raw[:, :, :3]
        col = 3
        for l, h in spec.entries:
            width = h * (2 * l + 1)
            features[l][:] = raw[:, :, col : col + width].reshape(n_frames, n, h, 2 * l + 1)
            col += width
    return TctData(spec, labels, frame_interval, positions, features, mask)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_to_json(cfg: NetworkConfig, schedule_kind: str, scales: NoiseScales,
                   extra: dict | None = None) -> str:
    doc = {
        "state_spec": list(cfg.state_spec.entries),
        "cond_spec": None if cfg.cond_spec is None else list(cfg.cond_spec.entries),
        "vocab": list(cfg.vocab),
        "hidden_mult": cfg.hidden_mult,
        "lmax": cfg.lmax,
        "k_neighbors": cfg.k_neighbors,
        "layers_cond": cfg.layers_cond,
        "layers_header": cfg.layers_header,
        "n_radial": cfg.n_radial,
        "radial_cutoff": cfg.radial_cutoff,
        "tau_dim": cfg.tau_dim,
        "schedule_kind": schedule_kind,
        "var_features": scales.var_features,
        "var_positions": scales.var_positions,
        "extra": extra or {},
    }
    return json.dumps(doc, sort_keys=True)


def config_from_json(text: str):
    doc = json.loads(text)
    cond = doc.get("cond_spec")
    cfg = NetworkConfig(
        state_spec=IrrepsSpec(tuple((int(l), int(h)) for l, h in doc["state_spec"])),
        cond_spec=None if cond is None else IrrepsSpec(tuple((int(l), int(h)) for l, h in cond)),
        vocab=tuple(doc["vocab"]),
        hidden_mult=doc["hidden_mult"],
        lmax=doc["lmax"],
        k_neighbors=doc["k_neighbors"],
        layers_cond=doc["layers_cond"],
        layers_header=doc["layers_header"],
        n_radial=doc["n_radial"],
        radial_cutoff=doc["radial_cutoff"],
        tau_dim=doc["tau_dim"],
    )
    scales = NoiseScales(doc["var_features"], doc["var_positions"])
    return cfg, doc["schedule_kind"], scales, doc.get("extra", {})


def config_hash(config_json: str) -> str:
    return hashlib.blake2b(config_json.encode(), digest_size=16).hexdigest()


def write_checkpoint(path, config_json: str, flat_params: np.ndarray,
                     opt_state: dict | None = None) -> None:
    """f32 parameter payload plus an optional f64 exact-resume section."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = config_json.encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", flat_params.size))
    buf.write(flat_params.astype("<f4").tobytes())
    if opt_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", opt_state["step"]))
        buf.write(flat_params.astype("<f8").tobytes())
        buf.write(opt_state["m"].astype("<f8").tobytes())
        buf.write(opt_state["v"].astype("<f8").tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    payload, digest = blob[:-8], blob[-8:]
    if _checksum(payload) != digest:
        raise FormatError(f"{path}: checksum mismatch (corrupted file)")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off); off += 4
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", payload, off); off += 4
    config_json = payload[off : off + clen].decode(); off += clen
    (psize,) = struct.unpack_from("<Q", payload, off); off += 8
    params32 = np.frombuffer(payload, dtype="<f4", count=psize, offset=off).astype(np.float64)
    off += 4 * psize
    (has_resume,) = struct.unpack_from("<B", payload, off); off += 1
    out = {
        "config_json": config_json,
        "config_hash": config_hash(config_json),
        "params": params32,
        "resume": None,
    }
    if has_resume:
        (step,) = struct.unpack_from("<Q", payload, off); off += 8
        p64 = np.frombuffer(payload, dtype="<f8", count=psize, offset=off).copy(); off += 8 * psize
        m = np.frombuffer(payload, dtype="<f8", count=psize, offset=off).copy(); off += 8 * psize
        v = np.frombuffer(payload, dtype="<f8", count=psize, offset=off).copy(); off += 8 * psize
        out["resume"] = {"step": int(step), "params": p64, "m": m, "v": v}
    return out


# ---------------------------------------------------------------------------
# pair index
# ---------------------------------------------------------------------------


def write_pair_index(path, entries: list[tuple[str, int, int]]) -> None:
    """CSV of (trajectory file, frame, lag) training pairs."""
    with open(path, "w") as fh:
        fh.write("trajectory,frame,lag\n")
        for name, frame, lag in entries:
            fh.write(f"{name},{frame},{lag}\n")


def read_pair_index(path) -> list[tuple[str, int, int]]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "trajectory,frame,lag":
            raise FormatError(f"{path}: not a pair index file")
        for line in fh:
            name, frame, lag = line.strip().split(",")
            out.append((name, int(frame), int(lag)))
    return out
