"""The equivariant drift/noise network.

A conditioner network embeds the residue labels and the current
simulation frame into a latent cloud; four independent header networks
read that conditioning together with the latent transport state and the
latent time to predict the feature and coordinate components of the
drift and of the noise.

Every deep network is a stack of Self-Interaction (per-channel tensor
square, scalar-gated, linearly mixed), Spatial Convolution (k-nearest
neighbour messages built from radial embeddings and spherical harmonics
of relative offsets) and equivariant layer norm with residual
connections on the features; node positions are never modified, so
coordinate outputs are read from a dedicated degree-1 feature channel.

All forward functions run on stacked batches (one leading axis) and
accept parameters either as plain arrays or autodiff Vars; gradients of
the training objective are exact reverse-mode derivatives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cloud import NoiseScales, TensorCloud
from .irreps import (
    IrrepsSpec,
    layer_norm,
    linear_mix,
    spherical_harmonics_all,
    tensor_square,
    tensor_square_layout,
)

HEAD_NAMES = ("drift_v", "drift_p", "noise_v", "noise_p")

_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; everything shape-relevant lives here.

    `state_spec` describes the transported cloud (may be feature-free for
    worlds whose state is pure geometry); `cond_spec` describes the cloud
    the conditioner sees, which may carry extra static channels that are
    re-supplied every simulation step rather than transported.
    """

    state_spec: IrrepsSpec
    vocab: tuple[str, ...]
    cond_spec: IrrepsSpec | None = None
    hidden_mult: int = 8
    lmax: int = 1
    k_neighbors: int = 16
    layers_cond: int = 6
    layers_header: int = 4
    n_radial: int = 8
    radial_cutoff: float = 12.0
    tau_dim: int = 16

    def __post_init__(self):
        if self.hidden_mult < 1 or self.k_neighbors < 1:
            raise ValueError("hidden multiplicity and neighbour count must be >= 1")
        if self.layers_cond < 1 or self.layers_header < 1:
            raise ValueError("layer counts must be >= 1")

    @property
    def conditioning_spec(self) -> IrrepsSpec:
        return self.cond_spec if self.cond_spec is not None else self.state_spec

    @property
    def hidden_spec(self) -> IrrepsSpec:
        return IrrepsSpec(tuple((l, self.hidden_mult) for l in range(self.lmax + 1)))

    @property
    def position_spec(self) -> IrrepsSpec:
        return IrrepsSpec(((1, 1),))

    def active_heads(self, names=HEAD_NAMES) -> tuple[str, ...]:
        """Feature headers are dropped when the state carries no features."""
        if self.state_spec.entries:
            return tuple(names)
        return tuple(n for n in names if n.endswith("_p"))

    def label_ids(self, labels) -> np.ndarray:
        table = {name: i for i, name in enumerate(self.vocab)}
        try:
            ids = np.asarray([[table[x] for x in row] for row in np.atleast_2d(labels)])
        except KeyError as exc:
            raise ValueError(f"unknown residue label {exc.args[0]!r}") from exc
        return ids


@dataclass
class CloudBatch:
    """Stacked clouds: features (B, N, H, 2l+1) per degree, positions (B, N, 3)."""

    features: dict
    positions: object

    @classmethod
    def stack(cls, clouds: list[TensorCloud]) -> "CloudBatch":
        spec = clouds[0].spec
        n = clouds[0].n_nodes
        for c in clouds[1:]:
            if c.spec != spec or c.n_nodes != n:
                raise ValueError("all clouds in a batch must share spec and node count")
        feats = {l: np.stack([c.features[l] for c in clouds]) for l, _ in spec.entries}
        pos = np.stack([c.positions for c in clouds])
        return cls(feats, pos)

    def unstack(self, spec: IrrepsSpec, mask=None) -> list[TensorCloud]:
        pos = ad.value_of(self.positions)
        feats = {l: ad.value_of(v) for l, v in self.features.items()}
        return [
            TensorCloud(spec, {l: feats[l][b] for l in feats}, pos[b], mask)
            for b in range(pos.shape[0])
        ]


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _linear_init(rng, h_out: int, h_in: int, scale: float | None = None):
    if scale is None:
        scale = 1.0 / np.sqrt(max(h_in, 1))
    return rng.normal(scale=scale, size=(h_out, h_in))


def _mlp_init(rng, d_in: int, width: int, d_out: int) -> dict:
    return {
        "w0": _linear_init(rng, width, d_in),
        "b0": np.zeros(width),
        "w1": _linear_init(rng, width, width),
        "b1": np.zeros(width),
        "w2": _linear_init(rng, d_out, width),
        "b2": np.zeros(d_out),
    }


def _square_mults(spec: IrrepsSpec, max_degree: int) -> dict[int, int]:
    mults: dict[int, int] = {}
    for entry in tensor_square_layout(spec, max_degree, skip_null=True):
        if entry[0] == "input":
            l = entry[1]
            mults[l] = mults.get(l, 0) + spec.mult(l)
        else:
            l3 = entry[3]
            mults[l3] = mults.get(l3, 0) + spec.mult(entry[1])
    return dict(sorted(mults.items()))


def _si_init(rng, cfg: NetworkConfig, out_spec: IrrepsSpec, zero_out: bool = False) -> dict:
    hidden = cfg.hidden_spec
    cap = max(out_spec.lmax, cfg.lmax)
    sq = _square_mults(hidden, cap)
    n_gates = sum(sq.values())
    params = {
        "gate": _mlp_init(rng, hidden.mult(0), cfg.hidden_mult, n_gates),
        "lin": {},
    }
    for l, h_out in out_spec.entries:
        h_in = sq.get(l, 0)
        if h_in:
            w = np.zeros((h_out, h_in)) if zero_out else _linear_init(rng, h_out, h_in)
            params["lin"][l] = w
    return params


def _conv_paths(lmax: int) -> list[tuple[int, int, int]]:
    paths = []
    for l1 in range(lmax + 1):
        for l2 in range(lmax + 1):
            for l3 in range(abs(l1 - l2), min(l1 + l2, lmax) + 1):
                paths.append((l1, l2, l3))
    return paths


def _conv_init(rng, cfg: NetworkConfig) -> dict:
    h = cfg.hidden_mult
    paths = _conv_paths(cfg.lmax)
    msg_mult = {l: 0 for l in range(cfg.lmax + 1)}
    for _, _, l3 in paths:
        msg_mult[l3] += h
    return {
        "gate": _mlp_init(rng, cfg.n_radial + 2 * h, h, h * (cfg.lmax + 1)),
        "lin_msg": {l: _linear_init(rng, h, m) for l, m in msg_mult.items()},
        "lin_out": {l: _linear_init(rng, h, h) for l in range(cfg.lmax + 1)},
    }


def _dnn_init(rng, cfg: NetworkConfig, in_spec: IrrepsSpec, out_spec: IrrepsSpec,
              n_blocks: int, zero_out: bool = False) -> dict:
    h = cfg.hidden_mult
    lift = {}
    for l, h_in in in_spec.entries:
        if l <= cfg.lmax:
            lift[l] = _linear_init(rng, h, h_in)
    params = {
        "lift": lift,
        "init": _si_init(rng, cfg, cfg.hidden_spec),
        "blocks": {},
        "agg": {l: _linear_init(rng, h, (n_blocks + 1) * h) for l in range(cfg.lmax + 1)},
        "out": _si_init(rng, cfg, out_spec, zero_out=zero_out),
    }
    for i in range(n_blocks):
        params["blocks"][str(i)] = {
            "si": _si_init(rng, cfg, cfg.hidden_spec),
            "conv": _conv_init(rng, cfg),
        }
    return params


def init_params(cfg: NetworkConfig, seed: int) -> dict:
    """Deterministic parameter tree; header output layers start at zero."""
    rng = np.random.default_rng(seed)
    h = cfg.hidden_mult
    cond_in = _concat_specs(cfg.conditioning_spec, IrrepsSpec(((0, h),)))
    header_in = _header_input_spec(cfg)
    params = {
        "embed": rng.normal(scale=1.0, size=(len(cfg.vocab), h)),
        "cond": _dnn_init(rng, cfg, cond_in, cfg.hidden_spec, cfg.layers_cond),
    }
    for name in cfg.active_heads():
        out_spec = cfg.state_spec if name.endswith("_v") else cfg.position_spec
        params[name] = {
            "tau_proj": {"w": _linear_init(rng, h, cfg.tau_dim), "b": np.zeros(h)},
            "dnn": _dnn_init(rng, cfg, header_in, out_spec, cfg.layers_header, zero_out=True),
        }
    return params


def _concat_specs(*specs: IrrepsSpec) -> IrrepsSpec:
    mults: dict[int, int] = {}
    for spec in specs:
        for l, h in spec.entries:
            mults[l] = mults.get(l, 0) + h
    return IrrepsSpec(tuple(sorted(mults.items())))


def _header_input_spec(cfg: NetworkConfig) -> IrrepsSpec:
    return _concat_specs(cfg.hidden_spec, cfg.state_spec, IrrepsSpec(((0, cfg.hidden_mult),)))


# flat packing -------------------------------------------------------------


def param_layout(params: dict) -> list[tuple[str, tuple]]:
    """Deterministic (path, shape) listing of every leaf array."""
    layout = []

    def visit(node, path):
        if isinstance(node, dict):
            for key in sorted(node):
                visit(node[key], f"{path}/{key}")
        else:
            layout.append((path, ad.value_of(node).shape))

    visit(params, "")
    return layout


def pack_params(params: dict) -> np.ndarray:
    chunks = []

    def visit(node):
        if isinstance(node, dict):
            for key in sorted(node):
                visit(node[key])
        else:
            chunks.append(ad.value_of(node).ravel())

    visit(params)
    return np.concatenate(chunks) if chunks else np.zeros(0)


def unpack_params(flat: np.ndarray, template: dict) -> dict:
    flat = np.asarray(flat, dtype=np.float64)
    offset = 0

    def visit(node):
        nonlocal offset
        if isinstance(node, dict):
            return {key: visit(node[key]) for key in sorted(node)}
        shape = ad.value_of(node).shape
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[offset : offset + size].reshape(shape)
        offset += size
        return chunk

    out = visit(template)
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, expected {offset}")
    return out


def map_params(fn, *trees):
    if isinstance(trees[0], dict):
        return {k: map_params(fn, *[t[k] for t in trees]) for k in sorted(trees[0])}
    return fn(*trees)


# ---------------------------------------------------------------------------
# geometry (plain numpy; positions carry no gradients)
# ---------------------------------------------------------------------------


def build_geometry(positions: np.ndarray, cfg: NetworkConfig):
    """kNN graph, radial embedding and offset harmonics for a (B, N, 3) batch.

    Returns None for single-node clouds (no neighbours); degenerate
    (coincident) offsets are masked to zero-weight edges.
    """
    pos = ad.value_of(positions)
    b, n, _ = pos.shape
    if n == 1:
        return None
    k = cfg.k_neighbors
    if k > n - 1:
        warnings.warn(
            f"k_neighbors={k} exceeds N-1={n - 1}; clamping", RuntimeWarning, stacklevel=2
        )
        k = n - 1
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    d2 = np.einsum("bijc,bijc->bij", diff, diff)
    eye = np.eye(n, dtype=bool)
    d2[:, eye] = np.inf
    idx = np.argsort(d2, axis=-1, kind="stable")[:, :, :k]
    offsets = np.take_along_axis(diff, idx[..., None], axis=2)
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    ok = dist > _EDGE_TOL
    safe = np.where(ok, dist, 1.0)
    units = offsets / safe[..., None]

    centers = np.linspace(0.0, cfg.radial_cutoff, cfg.n_radial)
    width = cfg.radial_cutoff / cfg.n_radial
    radial = np.exp(-(((dist[..., None] - centers) / width) ** 2))
    envelope = np.where(
        dist < cfg.radial_cutoff, 0.5 * (np.cos(np.pi * dist / cfg.radial_cutoff) + 1.0), 0.0
    )
    radial = radial * (envelope * ok)[..., None]

    sph = spherical_harmonics_all(cfg.lmax, units)
    sph = {l: y * ok[..., None] for l, y in sph.items()}
    # pre-contract the offset harmonics into the CG tensors once; every
    # convolution block then reduces to one batched matmul per path
    from .irreps import clebsch_gordan

    sph_cg = {}
    for l1, l2, l3 in _conv_paths(cfg.lmax):
        cg = clebsch_gordan(l1, l2, l3)
        sph_cg[(l1, l2, l3)] = np.einsum("pqr,bnkq->bnkpr", cg, sph[l2])
    return {"idx": idx, "radial": radial, "sph": sph, "sph_cg": sph_cg, "k": k}


# ---------------------------------------------------------------------------
# forward blocks
# ---------------------------------------------------------------------------


def _mlp_apply(params: dict, x):
    h = ad.silu(ad.affine_vec(x, params["w0"], params["b0"]))
    h = ad.silu(ad.affine_vec(h, params["w1"], params["b1"]))
    return ad.affine_vec(h, params["w2"], params["b2"])


def _scalar_channels(features: dict):
    arr = features[0]
    shape = ad.value_of(arr).shape
    return ad.reshape(arr, shape[:-1])


def self_interaction_batched(features: dict, params: dict, out_spec: IrrepsSpec,
                             cap: int) -> dict:
    """Gate the input ⊕ per-channel-square stack by an MLP of the input scalars."""
    gates = _mlp_apply(params["gate"], _scalar_channels(features))
    stacked = tensor_square(features, max_degree=cap, skip_null=True)
    degrees = sorted(stacked)
    sizes = [ad.value_of(stacked[l]).shape[-2] for l in degrees]
    gate_parts = ad.split(gates, sizes, axis=-1)
    gated = {}
    for l, part in zip(degrees, gate_parts):
        shape = ad.value_of(part).shape
        gated[l] = ad.mul(stacked[l], ad.reshape(part, shape + (1,)))
    out = linear_mix({l: gated[l] for l in params["lin"]}, params["lin"])
    lead = ad.value_of(features[min(features)]).shape[:-2]
    for l, h in out_spec.entries:
        if l not in out:
            out[l] = np.zeros(lead + (h, 2 * l + 1))
    return {l: out[l] for l, _ in out_spec.entries}


def spatial_convolution_batched(features: dict, geometry, params: dict,
                                cfg: NetworkConfig) -> dict:
    """kNN message passing; with no neighbours only the residual linear runs."""
    if geometry is None:
        mean_msg = {l: 0.0 for l in features}
    else:
        idx, radial, k = geometry["idx"], geometry["radial"], geometry["k"]
        neigh = {l: ad.gather_nodes(features[l], idx) for l in features}
        scal = _scalar_channels(features)  # (B, N, H)
        scal_j = ad.gather_nodes(scal, idx)  # (B, N, k, H)
        scal_i = ad.reshape(scal, ad.value_of(scal).shape[:2] + (1,) + ad.value_of(scal).shape[2:])
        scal_i = ad.add(scal_i, np.zeros_like(ad.value_of(scal_j)))
        gate_in = ad.concat([radial, scal_j, scal_i], axis=-1)
        gates = _mlp_apply(params["gate"], gate_in)  # (B, N, k, H*(lmax+1))

        msg_parts: dict[int, list] = {}
        for l1, l2, l3 in _conv_paths(cfg.lmax):
            part = ad.matmul_pair(neigh[l1], geometry["sph_cg"][(l1, l2, l3)])
            msg_parts.setdefault(l3, []).append(part)
        msg = {
            l: ad.matmul_left(params["lin_msg"][l],
                              parts[0] if len(parts) == 1 else ad.concat(parts, axis=-2))
            for l, parts in sorted(msg_parts.items())
        }
        degrees = sorted(msg)
        gate_parts = ad.split(gates, [cfg.hidden_mult] * len(degrees), axis=-1)
        mean_msg = {}
        for l, gate in zip(degrees, gate_parts):
            g = ad.reshape(gate, ad.value_of(gate).shape + (1,))
            mean_msg[l] = ad.mul(ad.reduce_sum(ad.mul(msg[l], g), axis=2), 1.0 / k)
    summed = {l: ad.add(features[l], mean_msg[l]) for l in features}
    return linear_mix(summed, params["lin_out"])


def dnn_forward_batched(features: dict, geometry, params: dict, cfg: NetworkConfig,
                        out_spec: IrrepsSpec, n_blocks: int) -> dict:
    """Lift -> Self-Interaction -> n blocks -> aggregate -> Self-Interaction."""
    lifted = linear_mix({l: features[l] for l in params["lift"]}, params["lift"])
    lead = ad.value_of(next(iter(features.values()))).shape[:2]
    for l in range(cfg.lmax + 1):
        if l not in lifted:
            lifted[l] = np.zeros(lead + (cfg.hidden_mult, 2 * l + 1))
    h = self_interaction_batched(lifted, params["init"], cfg.hidden_spec, cfg.lmax)
    states = [h]
    for i in range(n_blocks):
        block = params["blocks"][str(i)]
        t = self_interaction_batched(h, block["si"], cfg.hidden_spec, cfg.lmax)
        t = spatial_convolution_batched(t, geometry, block["conv"], cfg)
        h = layer_norm({l: ad.add(t[l], h[l]) for l in t})
        states.append(h)
    agg_in = {
        l: states[0][l] if len(states) == 1 else ad.concat([s[l] for s in states], axis=-2)
        for l in range(cfg.lmax + 1)
    }
    h = linear_mix(agg_in, params["agg"])
    return self_interaction_batched(h, params["out"], out_spec, max(out_spec.lmax, cfg.lmax))


# ---------------------------------------------------------------------------
# conditioner and headers
# ---------------------------------------------------------------------------


def condition_batched(label_ids: np.ndarray, x: CloudBatch, params: dict,
                      cfg: NetworkConfig) -> CloudBatch:
    if label_ids.shape != ad.value_of(x.positions).shape[:2]:
        raise ValueError("one label per node is required")
    if label_ids.max() >= len(cfg.vocab) or label_ids.min() < 0:
        raise ValueError("unknown residue label id")
    emb = ad.take_rows(params["embed"], label_ids)  # (B, N, H)
    emb = ad.reshape(emb, ad.value_of(emb).shape + (1,))
    feats = dict(x.features)
    feats[0] = emb if 0 not in feats else ad.concat([feats[0], emb], axis=-2)
    geom = build_geometry(x.positions, cfg)
    out = dnn_forward_batched(feats, geom, params["cond"], cfg, cfg.hidden_spec, cfg.layers_cond)
    return CloudBatch(out, x.positions)


def tau_embedding(tau: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of the latent time.

    Frequencies pi, 2pi, ..., keep the embedding smooth on [0, 1] so the
    learned drift stays integrable with coarse Euler steps.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    half = dim // 2
    freqs = np.pi * (1.0 + np.arange(half))
    ang = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def heads_forward_batched(cond: CloudBatch, x_tau: CloudBatch, tau: np.ndarray,
                          params: dict, cfg: NetworkConfig,
                          heads=HEAD_NAMES) -> dict[str, CloudBatch]:
    """Run the requested header networks on (conditioning, latent state, tau).

    Geometry comes from the latent positions and is shared by all headers.
    Feature headers return state-spec clouds; position headers return their
    dedicated degree-1 channel as the cloud positions.
    """
    b, n = ad.value_of(x_tau.positions).shape[:2]
    emb = tau_embedding(tau, cfg.tau_dim)
    if emb.shape[0] == 1 and b > 1:
        emb = np.repeat(emb, b, axis=0)
    geom = build_geometry(x_tau.positions, cfg)
    zero_pos = np.zeros((b, n, 3))
    out: dict[str, CloudBatch] = {}
    for name in cfg.active_heads(heads):
        head = params[name]
        tproj = ad.affine_vec(emb, head["tau_proj"]["w"], head["tau_proj"]["b"])
        tproj = ad.reshape(tproj, (b, 1, cfg.hidden_mult, 1))
        tproj = ad.add(tproj, np.zeros((b, n, cfg.hidden_mult, 1)))
        feats = {}
        for l in range(cfg.lmax + 1):
            parts = []
            if l in cond.features:
                parts.append(cond.features[l])
            if l in x_tau.features:
                parts.append(x_tau.features[l])
            if l == 0:
                parts.append(tproj)
            feats[l] = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-2)
        out_spec = cfg.state_spec if name.endswith("_v") else cfg.position_spec
        res = dnn_forward_batched(feats, geom, head["dnn"], cfg, out_spec, cfg.layers_header)
        if name.endswith("_v"):
            out[name] = CloudBatch(res, zero_pos)
        else:
            vec = ad.reshape(res[1], (b, n, 3))
            out[name] = CloudBatch({}, vec)
    return out


def head_cloud(heads: dict[str, CloudBatch], kind: str) -> CloudBatch:
    """Join the feature and position headers of one prediction kind."""
    feats = heads[f"{kind}_v"].features if f"{kind}_v" in heads else {}
    return CloudBatch(feats, heads[f"{kind}_p"].positions)


def assemble_drift_noise(heads: dict[str, CloudBatch]) -> tuple[CloudBatch, CloudBatch]:
    return head_cloud(heads, "drift"), head_cloud(heads, "noise")


# single-cloud wrappers -----------------------------------------------------


def condition(labels, x: TensorCloud, params: dict, cfg: NetworkConfig) -> TensorCloud:
    """Conditioner: residue embeddings injected into scalars, then the deep net."""
    ids = cfg.label_ids(labels)
    batch = CloudBatch.stack([x])
    out = condition_batched(ids, batch, params, cfg)
    return out.unstack(cfg.hidden_spec)[0]


def heads_forward(cond_cloud: TensorCloud, x_tau: TensorCloud, tau: float, params: dict,
                  cfg: NetworkConfig) -> tuple[TensorCloud, TensorCloud]:
    """Drift and noise predictions as state-spec clouds at one latent time."""
    cond_b = CloudBatch.stack([cond_cloud])
    xt_b = CloudBatch.stack([x_tau])
    if cond_b.positions.shape[1] != xt_b.positions.shape[1]:
        raise ValueError("conditioning and latent clouds must share node count")
    heads = heads_forward_batched(cond_b, xt_b, np.asarray([tau]), params, cfg)
    drift, noise = assemble_drift_noise(heads)
    spec = cfg.state_spec
    return (
        TensorCloud(spec, {l: ad.value_of(v)[0] for l, v in drift.features.items()},
                    ad.value_of(drift.positions)[0], x_tau.mask),
        TensorCloud(spec, {l: ad.value_of(v)[0] for l, v in noise.features.items()},
                    ad.value_of(noise.positions)[0], x_tau.mask),
    )


def self_interaction(x: TensorCloud, params: dict, out_spec: IrrepsSpec,
                     cfg: NetworkConfig) -> TensorCloud:
    """Public single-cloud Self-Interaction (positions pass through)."""
    batch = CloudBatch.stack([x])
    out = self_interaction_batched(batch.features, params, out_spec,
                                   max(out_spec.lmax, cfg.lmax))
    return TensorCloud(out_spec, {l: ad.value_of(v)[0] for l, v in out.items()},
                       x.positions.copy())


def spatial_convolution(x: TensorCloud, params: dict, cfg: NetworkConfig) -> TensorCloud:
    """Public single-cloud Spatial Convolution (positions pass through)."""
    batch = CloudBatch.stack([x])
    geom = build_geometry(batch.positions, cfg)
    out = spatial_convolution_batched(batch.features, geom, params, cfg)
    return TensorCloud(cfg.hidden_spec, {l: ad.value_of(v)[0] for l, v in out.items()},
                       x.positions.copy())


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------


def batch_dot(a: CloudBatch, b: CloudBatch):
    """Tensor-cloud dot product summed over the batch (Var-aware)."""
    total = None
    for l in a.features:
        term = ad.einsum("bnhm,bnhm->", a.features[l], b.features[l])
        total = term if total is None else ad.add(total, term)
    if a.positions is not None and b.positions is not None:
        term = ad.einsum("bnc,bnc->", a.positions, b.positions)
        total = term if total is None else ad.add(total, term)
    return total


def sample_noise_batch(spec: IrrepsSpec, b: int, n: int, scales: NoiseScales,
                       rng: np.random.Generator, mask=None) -> CloudBatch:
    sig_v = float(np.sqrt(scales.var_features))
    sig_p = float(np.sqrt(scales.var_positions))
    feats = {}
    for l, h in spec.entries:
        z = rng.normal(scale=sig_v, size=(b, n, h, 2 * l + 1))
        if mask is not None:
            z = z * np.asarray(mask[l], dtype=float)[None, :, :, None]
        feats[l] = z
    pos = rng.normal(scale=sig_p, size=(b, n, 3))
    return CloudBatch(feats, pos)


def _combine(coeff_pairs) -> CloudBatch:
    """Linear combination sum_i c_i * cloud_i with per-batch coefficients."""
    feats: dict[int, object] = {}
    pos = None
    for c, cb in coeff_pairs:
        c = np.asarray(c, dtype=np.float64)
        cf = c[:, None, None, None]
        cp = c[:, None, None]
        for l, v in cb.features.items():
            term = cf * ad.value_of(v)
            feats[l] = term if l not in feats else feats[l] + term
        term = cp * ad.value_of(cb.positions)
        pos = term if pos is None else pos + term
    return CloudBatch(feats, pos)


def training_loss(params: dict, label_ids: np.ndarray, x0: CloudBatch, x1: CloudBatch,
                  schedule, rng: np.random.Generator, cfg: NetworkConfig,
                  cond_input: CloudBatch | None = None, mask=None):
    """Draw (tau, Z), build the latent state and evaluate the drift+noise objective.

    Returns a Var (if params contain Vars) or a float.  `schedule` provides
    coefficient callables a0/a1/gamma and their derivatives plus the set of
    heads in use; `cond_input` is the data frame the conditioner sees
    (defaults to x0).
    """
    b, n = ad.value_of(x1.positions).shape[:2]
    tau = rng.uniform(size=b)
    z = sample_noise_batch(cfg.state_spec, b, n, schedule.scales, rng, mask)
    x_tau = _combine([
        (schedule.a0(tau), x0),
        (schedule.a1(tau), x1),
        (schedule.gamma(tau), z),
    ])
    target = _combine([
        (schedule.a0_dot(tau), x0),
        (schedule.a1_dot(tau), x1),
        (schedule.gamma_dot(tau), z),
    ])
    cond = condition_batched(label_ids, cond_input if cond_input is not None else x0,
                             params, cfg)
    head_names = schedule.head_names()
    heads = heads_forward_batched(cond, x_tau, tau, params, cfg, heads=head_names)
    loss = None
    for kind, ref in (("drift", target), ("noise", z)):
        if f"{kind}_p" not in heads:
            continue
        pred = head_cloud(heads, kind)
        if mask is not None:
            feats = {l: ad.mul(pred.features[l],
                               np.asarray(mask[l], dtype=float)[None, :, :, None])
                     for l in pred.features}
            pred = CloudBatch(feats, pred.positions)
        term = ad.sub(ad.mul(batch_dot(pred, pred), 0.5), batch_dot(pred, ref))
        loss = term if loss is None else ad.add(loss, term)
    return ad.mul(loss, 1.0 / b)


def loss_and_grad(params: dict, batch, schedule, rng: np.random.Generator,
                  cfg: NetworkConfig) -> tuple[float, np.ndarray]:
    """Objective value and exact reverse-mode gradient as a flat vector.

    `batch` is a list of (labels, X_t, X_t1) tuples sharing one system;
    a fourth element may carry the conditioning cloud when it differs
    from the transported frame (static channels re-supplied per step).
    """
    labels = [item[0] for item in batch]
    ids = cfg.label_ids(labels[0])
    ids = np.repeat(ids, len(batch), axis=0) if ids.shape[0] == 1 else ids
    xt = CloudBatch.stack([item[1] for item in batch])
    xt1 = CloudBatch.stack([item[2] for item in batch])
    mask = batch[0][1].mask
    var_params = map_params(lambda a: ad.Var(a), params)
    x0, cond_input = _source_batch(xt, schedule, rng, cfg)
    if len(batch[0]) > 3:
        cond_input = CloudBatch.stack([item[3] for item in batch])
    loss = training_loss(var_params, ids, x0, xt1, schedule, rng, cfg,
                         cond_input=cond_input, mask=mask)
    if not ad.is_var(loss):
        raise ValueError("loss did not depend on any parameter")
    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite training loss")
    loss.backward(np.ones(()))
    grads = map_params(
        lambda v: v.grad if v.grad is not None else np.zeros_like(v.value), var_params
    )
    return value, pack_params(grads)


def _source_batch(xt: CloudBatch, schedule, rng: np.random.Generator,
                  cfg: NetworkConfig) -> tuple[CloudBatch, CloudBatch]:
    """The tau=0 endpoint per the schedule; conditioning always sees the data frame."""
    if schedule.source == "data":
        return xt, xt
    b, n = xt.positions.shape[:2]
    if schedule.needs_prior_endpoint():
        prior = sample_noise_batch(cfg.state_spec, b, n, schedule.scales, rng)
        return prior, xt
    zeros = CloudBatch(
        {l: np.zeros_like(v) for l, v in xt.features.items()}, np.zeros_like(xt.positions)
    )
    return zeros, xt