"""Command-line surface tying generation, training, sampling and analysis together.

Commands: gen-data, train, sample, analyze, compare-transports, sweep.
Every command is a pure function of (config, input files, seed): outputs
are byte-reproducible under a fixed seed.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import time
import warnings

import numpy as np

from . import analysis as ana
from . import fileio
from . import network as net
from . import transport as tp
from . import worlds
from .cloud import NoiseScales
from .config import RunConfig, load_config


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------


def _build_potential(cfg: RunConfig):
    kind = cfg["world.kind"]
    if kind == "double_well":
        return worlds.DoubleWell(a=cfg["world.a"], k=cfg["world.k"], tilt=cfg["world.tilt"])
    if kind == "harmonic_chain":
        return worlds.HarmonicChain(n_beads=cfg["world.n_beads"], k=cfg["world.spring_k"],
                                    r0=cfg["world.rest_length"])
    if kind == "gaussian_mixture_3d":
        centers = np.asarray(cfg["world.centers"], dtype=float).reshape(-1, 3)
        return worlds.GaussianMixture3D(
            centers=tuple(map(tuple, centers)),
            weights=tuple(cfg["world.weights"]),
            widths=tuple(cfg["world.widths"]),
            kT=cfg["world.kT"],
        )
    raise ValueError(f"unknown world kind {kind!r}")


def _bd_config(cfg: RunConfig) -> worlds.BdConfig:
    return worlds.BdConfig(dt=cfg["world.dt"], kT=cfg["world.kT"],
                           friction=cfg["world.friction"], steps=cfg["world.steps"],
                           stride=cfg["world.stride"])


def _network_config(cfg: RunConfig, state_spec, cond_spec=None) -> net.NetworkConfig:
    return net.NetworkConfig(
        state_spec=state_spec,
        cond_spec=cond_spec,
        vocab=fileio.LABEL_REGISTRY,
        hidden_mult=cfg["model.hidden_mult"],
        lmax=cfg["model.lmax"],
        k_neighbors=cfg["model.k_neighbors"],
        layers_cond=cfg["model.layers_cond"],
        layers_header=cfg["model.layers_header"],
        n_radial=cfg["model.n_radial"],
        radial_cutoff=cfg["model.radial_cutoff"],
        tau_dim=cfg["model.tau_dim"],
    )


def _scales(cfg: RunConfig) -> NoiseScales:
    return NoiseScales(cfg["schedule.sigma_v"], cfg["schedule.sigma_p"])


def _schedule(cfg: RunConfig, kind: str | None = None) -> tp.InterpolantSchedule:
    return tp.make_schedule(kind or cfg["schedule.kind"], _scales(cfg))


def _sample_config(cfg: RunConfig, seed: int | None = None) -> tp.SampleConfig:
    floor = cfg["sample.gamma_floor"]
    return tp.SampleConfig(
        steps=cfg["sample.steps"],
        eps_scale=cfg["sample.eps"],
        gamma_floor=None if floor == 0.0 else floor,
        literal_noise_kick=cfg["sample.literal_kick"],
        seed=cfg["sample.seed"] if seed is None else seed,
    )


def _seed(cfg: RunConfig, args) -> int:
    return args.seed if args.seed is not None else cfg["seed"]


def _say(args, message: str) -> None:
    if getattr(args, "quiet", False):
        return
    print(message, file=sys.stdout)
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    os.makedirs(args.out, exist_ok=True)
    seed = _seed(cfg, args)
    potential = _build_potential(cfg)
    world = worlds.build_world(potential)
    pair_lag = cfg["world.pair_lag"]
    interval = cfg["world.dt"] * cfg["world.stride"]
    if cfg["world.steps"] == 0:
        # a valid header with zero frames and an empty pair index
        template = world.encode(np.zeros(potential.dim))
        empty = fileio.tct_from_clouds([], labels=world.labels, frame_interval=interval,
                                       spec=template.spec, n_nodes=template.n_nodes)
        fileio.write_tct(os.path.join(args.out, "traj_000.tct"), empty)
        fileio.write_pair_index(os.path.join(args.out, "pair_index.csv"), [])
        _say(args, "wrote 1 empty trajectory, 0 training pairs")
        return 0
    bd = _bd_config(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    dataset = worlds.generate_dataset(potential, bd, cfg["world.n_trajectories"],
                                      pair_lag, rng)
    entries = []
    for j in range(dataset.states.shape[0]):
        name = f"traj_{j:03d}.tct"
        clouds = world.encode_batch(dataset.states[j])
        fileio.write_tct(os.path.join(args.out, name),
                         fileio.tct_from_clouds(clouds, labels=world.labels,
                                                frame_interval=interval))
        for t in range(dataset.states.shape[1] - pair_lag):
            entries.append((name, t, pair_lag))
    fileio.write_pair_index(os.path.join(args.out, "pair_index.csv"), entries)
    _say(args, f"wrote {dataset.states.shape[0]} trajectories, {len(entries)} training pairs")

    ref_steps = cfg["world.reference_steps"]
    if ref_steps > 0:
        walkers = cfg["world.reference_walkers"]
        per_walker = max(ref_steps // walkers, 1)
        ref_stride = bd.stride * pair_lag * cfg["world.reference_stride"]
        ref_bd = worlds.BdConfig(dt=bd.dt, kT=bd.kT, friction=bd.friction,
                                 steps=per_walker, stride=ref_stride)
        rng_ref = np.random.default_rng(np.random.SeedSequence((seed, 102)))
        x0 = rng_ref.normal(scale=0.5, size=(walkers, potential.dim))
        if isinstance(potential, worlds.DoubleWell):
            x0[:, 0] += np.where(np.arange(walkers) % 2 == 0, 1.0, -1.0)
        states = worlds.simulate(potential, ref_bd, x0, rng_ref)  # (frames, walkers, dim)
        burn = max(1, states.shape[0] // 20)  # discard the unequilibrated head
        states = states[burn:]
        ref_dir = os.path.join(args.out, "reference")
        os.makedirs(ref_dir, exist_ok=True)
        for w in range(walkers):
            clouds = world.encode_batch(states[:, w])
            fileio.write_tct(os.path.join(ref_dir, f"ref_{w:03d}.tct"),
                             fileio.tct_from_clouds(clouds, labels=world.labels,
                                                    frame_interval=bd.dt * ref_stride))
        _say(args, f"wrote reference ensemble: {walkers} walkers x {states.shape[0]} frames")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_pairs(data_dir: str):
    index = fileio.read_pair_index(os.path.join(data_dir, "pair_index.csv"))
    files = sorted({name for name, _, _ in index})
    trajs = {name: fileio.read_tct(os.path.join(data_dir, name)) for name in files}
    return index, trajs


def _pair_batch(index, trajs, picks, conditioning=None):
    batch = []
    for i in picks:
        name, t, lag = index[i]
        data = trajs[name]
        x_t = data.cloud(t)
        if conditioning is None:
            batch.append((data.labels, x_t, data.cloud(t + lag)))
        else:
            batch.append((data.labels, x_t, data.cloud(t + lag), conditioning(x_t)))
    return batch


def _enhanced_weights(cfg: RunConfig, index, trajs) -> np.ndarray:
    """Cluster-uniform sampling weights over training pairs (by source frame)."""
    feats, _, per_file = _featurize_files(cfg, trajs)
    lag_time = cfg["analysis.tica_lag"]
    lags = {name: max(1, round(lag_time / trajs[name].frame_interval)) for name in trajs}
    tica = ana.tica_fit([feats[name] for name in sorted(trajs)],
                        lag=max(1, min(lags.values())))
    dims = cfg["train.enhanced_tic_dims"]
    tics = {name: ana.tica_project(tica, feats[name], dims) for name in trajs}
    pair_points = np.stack([tics[name][t] for name, t, _ in index])
    k = min(cfg["train.enhanced_clusters"], len(index))
    return ana.cluster_weights_for_training(pair_points, k, cfg["analysis.kmeans_seed"])


def cmd_train(cfg: RunConfig, args) -> int:
    os.makedirs(args.out, exist_ok=True)
    seed = _seed(cfg, args)
    index, trajs = _load_pairs(args.data)
    first = trajs[sorted(trajs)[0]]
    conditioning = worlds.conditioning_for(first.labels)
    ncfg = _network_config(cfg, first.spec, worlds.cond_spec_for(first.labels))
    schedule = _schedule(cfg)
    tconfig = tp.TrainConfig(
        batch_size=cfg["train.batch_size"],
        total_steps=cfg["train.total_steps"],
        lr_start=cfg["train.lr_start"],
        lr_end=cfg["train.lr_end"],
        decay_steps=cfg["train.decay_steps"],
        seed=cfg["train.seed"],
    )
    config_json = fileio.config_to_json(ncfg, schedule.kind, schedule.scales)

    params = net.init_params(ncfg, seed=cfg["model.seed"])
    opt = tp.init_adam_state(params)
    start_step = 0
    if args.resume:
        ck = fileio.read_checkpoint(args.resume)
        if ck["config_hash"] != fileio.config_hash(config_json):
            raise SystemExit("resume refused: checkpoint configuration differs from this run")
        if ck["resume"] is None:
            raise SystemExit("resume refused: checkpoint carries no optimizer state")
        params = net.unpack_params(ck["resume"]["params"], params)
        opt = {"m": ck["resume"]["m"], "v": ck["resume"]["v"], "step": ck["resume"]["step"]}
        start_step = ck["resume"]["step"]

    weights = None
    if cfg["train.enhanced_sampling"]:
        weights = _enhanced_weights(cfg, index, trajs)
        _say(args, f"enhanced sampling over {len(index)} pairs "
                   f"({cfg['train.enhanced_clusters']} clusters)")

    log_path = os.path.join(args.out, "loss_log.csv")
    log_mode = "a" if start_step else "w"
    ckpt_path = os.path.join(args.out, "checkpoint.tjck")
    t0 = time.perf_counter()
    with open(log_path, log_mode) as log:
        if not start_step:
            log.write("step,loss,lr,seconds\n")
        for step in range(start_step + 1, tconfig.total_steps + 1):
            step_rng = np.random.default_rng(np.random.SeedSequence((seed, 201, step)))
            picks = step_rng.choice(len(index), size=tconfig.batch_size, p=weights)
            batch = _pair_batch(index, trajs, picks, conditioning)
            params, opt, loss = tp.train_step(params, batch, schedule, opt, step_rng,
                                              ncfg, tconfig)
            if step % cfg["train.log_every"] == 0 or step == tconfig.total_steps:
                log.write(f"{step},{loss:.10e},{tconfig.lr(step):.6e},"
                          f"{time.perf_counter() - t0:.3f}\n")
            if step % cfg["train.checkpoint_every"] == 0 or step == tconfig.total_steps:
                fileio.write_checkpoint(ckpt_path, config_json, net.pack_params(params),
                                        opt_state=opt)
    _say(args, f"trained to step {tconfig.total_steps}; checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _load_model(checkpoint_path: str):
    ck = fileio.read_checkpoint(checkpoint_path)
    ncfg, kind, scales, _ = fileio.config_from_json(ck["config_json"])
    template = net.init_params(ncfg, seed=0)
    params = net.unpack_params(ck["params"], template)
    return ncfg, tp.make_schedule(kind, scales), params


def cmd_sample(cfg: RunConfig, args) -> int:
    os.makedirs(args.out, exist_ok=True)
    seed = _seed(cfg, args)
    ncfg, schedule, params = _load_model(args.checkpoint)
    if args.eps is not None:
        cfg.set("sample.eps", args.eps)
    if args.dtau_steps is not None:
        cfg.set("sample.steps", args.dtau_steps)
    start = fileio.read_tct(args.start)
    if start.spec != ncfg.state_spec:
        raise SystemExit("start frames do not match the checkpoint state spec")
    n_traj = cfg["sample.n_trajectories"]
    n_steps = cfg["sample.n_steps"]
    if args.n_steps is not None:
        n_steps = args.n_steps
    if args.n_trajectories is not None:
        n_traj = args.n_trajectories
    labels = start.labels or ("?",) * start.n_nodes
    if n_steps == 0:
        out = fileio.tct_from_clouds([start.cloud(args.start_frame)], labels=labels,
                                     frame_interval=start.frame_interval)
        fileio.write_tct(os.path.join(args.out, "sample_000.tct"), out)
        _say(args, "n_steps=0: copied the start frame")
        return 0
    frame_ids = np.linspace(args.start_frame, start.n_frames - 1, n_traj).astype(int)
    starts = [start.cloud(t) for t in frame_ids]
    sample_cfg = _sample_config(cfg)
    conditioning = worlds.conditioning_for(labels)
    tic = time.perf_counter()
    trajectories = tp.rollout_ensemble(labels, starts, n_steps, params, schedule, ncfg,
                                       sample_cfg, seed=seed,
                                       frame_interval=start.frame_interval,
                                       conditioning=conditioning)
    wall = time.perf_counter() - tic
    for j, traj in enumerate(trajectories):
        fileio.write_tct(os.path.join(args.out, f"sample_{j:03d}.tct"),
                         fileio.tct_from_clouds(traj.frames, labels=labels,
                                                frame_interval=traj.frame_interval))
    per_step = [s for t in trajectories for s in t.step_seconds]
    _say(args, f"sampled {n_traj} trajectories x {n_steps} steps "
               f"({sample_cfg.steps} latent steps, eps={sample_cfg.eps_scale})")
    _say(args, f"timing: total {wall:.2f}s, per simulation step "
               f"mean {np.mean(per_step):.4f}s (batched over {n_traj} trajectories)")
    if any(t.status != "ok" for t in trajectories):
        _say(args, "warning: at least one trajectory truncated on non-finite state")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _featurize_one(cfg: RunConfig, data: fileio.TctData) -> np.ndarray:
    mode = cfg["analysis.featurization"]
    if mode == "auto":
        mode = "toy_state" if (data.labels and "ANCHOR" in data.labels) else "ca_distances"
    if mode == "ca_distances":
        return ana.featurize_ca_distances(data.positions)
    if mode == "toy_state":
        particle = data.labels.index("PARTICLE")
        anchor = data.labels.index("ANCHOR")
        rel = data.positions[:, particle] - data.positions[:, anchor]
        return rel[:, : cfg["analysis.state_dims"]]
    raise ValueError(f"unknown featurization {mode!r}")


def _featurize_files(cfg: RunConfig, trajs: dict) -> tuple[dict, int, dict]:
    feats = {name: _featurize_one(cfg, trajs[name]) for name in trajs}
    dim = next(iter(feats.values())).shape[1]
    counts = {name: f.shape[0] for name, f in feats.items()}
    return feats, dim, counts


def _observables(cfg: RunConfig, data: fileio.TctData, crystal) -> dict[str, np.ndarray]:
    pos = data.positions
    com = pos.mean(axis=1, keepdims=True)
    rg = np.sqrt(((pos - com) ** 2).sum(axis=-1).mean(axis=1))
    out = {"RG": rg}
    if crystal is not None:
        ref = crystal.positions[0]
        vals = {"RMSD": [], "GDT": [], "FNC": []}
        fnc_ok = ref.shape[0] >= 5
        for t in range(pos.shape[0]):
            _, _, aligned = ana.kabsch_align(pos[t], ref)
            vals["RMSD"].append(ana.rmsd(aligned, ref))
            vals["GDT"].append(ana.gdt(aligned, ref))
            if fnc_ok:
                vals["FNC"].append(ana.fraction_native_contacts(pos[t], ref))
        out["RMSD"] = np.asarray(vals["RMSD"])
        out["GDT"] = np.asarray(vals["GDT"])
        if fnc_ok:
            out["FNC"] = np.asarray(vals["FNC"])
    return out


def _expand_files(path: str) -> list[str]:
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.tct")))
        if not files:
            raise SystemExit(f"no .tct files inside {path}")
        return files
    return [path]


def _lag_frames(lag_time: float, interval: float) -> int:
    return max(1, round(lag_time / interval))


def run_analysis(cfg: RunConfig, reference_files: list[str],
                 sample_sets: dict[str, list[str]], out_dir: str) -> dict:
    """Shared analysis pipeline: TICA on the reference, MSM reweighting per set.

    Returns {observable: {set: js}} and writes report plus histogram files.
    """
    os.makedirs(out_dir, exist_ok=True)
    refs = {f: fileio.read_tct(f) for f in reference_files}
    first = refs[reference_files[0]]
    crystal = None
    if cfg["analysis.crystal"]:
        crystal = fileio.read_tct(cfg["analysis.crystal"])
        if crystal.n_nodes != first.n_nodes:
            raise SystemExit("crystal reference has incompatible node count")

    ref_feats, dim, _ = _featurize_files(cfg, refs)
    ref_interval = first.frame_interval
    tica_lag = _lag_frames(cfg["analysis.tica_lag"], ref_interval)
    tica = ana.tica_fit([ref_feats[f] for f in reference_files], lag=tica_lag)
    tic_dims = min(cfg["analysis.tic_dims"], dim)

    ref_tics = [ana.tica_project(tica, ref_feats[f], tic_dims) for f in reference_files]
    k = min(cfg["analysis.n_clusters"], sum(t.shape[0] for t in ref_tics))
    centers, _ = ana.kmeans(np.concatenate(ref_tics), k, cfg["analysis.kmeans_seed"])

    def assign(tics: np.ndarray) -> np.ndarray:
        d = ((tics[:, None, :] - centers[None]) ** 2).sum(axis=2)
        return d.argmin(axis=1)

    def set_values(files: list[str]) -> tuple[dict, list[np.ndarray], list[float], int]:
        datas = [fileio.read_tct(f) if f not in refs else refs[f] for f in files]
        obs: dict[str, list] = {}
        labels = []
        n_nodes = datas[0].n_nodes
        for data in datas:
            if data.n_nodes != n_nodes or data.n_nodes != first.n_nodes:
                raise SystemExit("incompatible node counts across trajectories")
            feats = _featurize_one(cfg, data)
            tics = ana.tica_project(tica, feats, tic_dims)
            labels.append(assign(tics))
            frame_obs = _observables(cfg, data, crystal)
            frame_obs["TIC1"] = tics[:, 0]
            if tic_dims >= 2:
                frame_obs["TIC2"] = tics[:, 1]
            for key, val in frame_obs.items():
                obs.setdefault(key, []).append(np.asarray(val))
        intervals = [d.frame_interval for d in datas]
        return obs, labels, intervals, n_nodes

    all_sets = {"reference": reference_files, **sample_sets}
    collected = {}
    for name, files in all_sets.items():
        try:
            obs, labels, intervals, _ = set_values(files)
            msm_lag = _lag_frames(cfg["analysis.msm_lag"], intervals[0])
            msm = ana.msm_estimate(labels, lag=msm_lag, n_states=k)
        except (ValueError, FloatingPointError) as exc:
            if name == "reference":
                raise
            warnings.warn(f"set {name!r} could not be analyzed ({exc}); reporting n/a",
                          RuntimeWarning)
            continue
        collected[name] = {"obs": obs, "labels": labels, "msm": msm}

    observable_names = ["TIC1", "TIC2", "RMSD", "GDT", "RG", "FNC"]
    n_bins = cfg["analysis.n_bins"]
    js_table: dict[str, dict[str, float | None]] = {}
    densities: dict[str, dict[str, tuple]] = {}
    for obs_name in observable_names:
        ref_entry = collected["reference"]
        if obs_name not in ref_entry["obs"]:
            js_table[obs_name] = {name: None for name in sample_sets}
            continue
        pools = {
            name: (np.concatenate(entry["obs"][obs_name]), np.concatenate(entry["labels"]))
            for name, entry in collected.items() if obs_name in entry["obs"]
        }
        bins = ana.shared_bins(pools["reference"][0], [v[0] for v in pools.values()], n_bins)
        dens = {}
        for name, (values, labels) in pools.items():
            edges, density = ana.reweight_histogram(values, labels,
                                                    collected[name]["msm"], bins)
            dens[name] = (edges, density)
        densities[obs_name] = dens
        js_table[obs_name] = {}
        for name in sample_sets:
            if name in dens:
                js_table[obs_name][name] = ana.js_divergence(dens["reference"][1],
                                                             dens[name][1])
            else:
                js_table[obs_name][name] = None

    _write_histograms(out_dir, densities, cfg["world.kT"])
    report = _format_report(cfg, reference_files, sample_sets, tica, collected, js_table)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report)
    return {"js": js_table, "report": report, "tica": tica, "collected": collected}


def _write_histograms(out_dir: str, densities: dict, kT: float) -> None:
    for obs_name, dens in densities.items():
        names = list(dens)
        edges = dens[names[0]][0]
        centers = 0.5 * (edges[:-1] + edges[1:])
        with open(os.path.join(out_dir, f"hist_{obs_name}.dat"), "w") as fh:
            fh.write("# " + " ".join(["bin_center"] + [f"p_{n}" for n in names]) + "\n")
            for i, c in enumerate(centers):
                row = [f"{c:.6e}"] + [f"{dens[n][1][i]:.6e}" for n in names]
                fh.write(" ".join(row) + "\n")
        with open(os.path.join(out_dir, f"fe_{obs_name}.dat"), "w") as fh:
            fh.write("# " + " ".join(["bin_center"] + [f"F_{n}_kT" for n in names]) + "\n")
            fes = {n: ana.free_energy(np.maximum(dens[n][1], 0), kT=kT) for n in names}
            for i, c in enumerate(centers):
                row = [f"{c:.6e}"]
                for n in names:
                    val = fes[n][i]
                    row.append("inf" if not np.isfinite(val) else f"{val:.6e}")
                fh.write(" ".join(row) + "\n")


def _format_report(cfg, reference_files, sample_sets, tica, collected, js_table) -> str:
    lines = ["== tensorjump analysis report =="]
    ref = collected["reference"]
    n_ref = sum(len(x) for x in ref["labels"])
    lines.append(f"reference: {len(reference_files)} file(s), {n_ref} frames")
    for name, files in sample_sets.items():
        if name in collected:
            n = sum(len(x) for x in collected[name]["labels"])
            lines.append(f"set {name}: {len(files)} file(s), {n} frames")
        else:
            lines.append(f"set {name}: {len(files)} file(s), analysis failed (n/a)")
    eig = ", ".join(f"{v:.4f}" for v in tica.eigenvalues[:4])
    lines.append(f"tica: lag={tica.lag} frames, leading eigenvalues [{eig}]")
    msm = ref["msm"]
    lines.append(f"msm: {msm.n_states} clusters, lag={msm.lag} frames, "
                 f"active={len(msm.active_set)}/{msm.n_states}")
    lines.append("")
    names = list(sample_sets)
    width = max([10] + [len(n) + 2 for n in names])
    header = "observable".ljust(12) + "".join(n.rjust(width) for n in names)
    lines.append("JS divergence vs reference (nats)")
    lines.append(header)
    for obs_name, row in js_table.items():
        cells = []
        for n in names:
            v = row.get(n)
            cells.append(("n/a" if v is None else f"{v:.4f}").rjust(width))
        lines.append(obs_name.ljust(12) + "".join(cells))
    return "\n".join(lines) + "\n"


def cmd_analyze(cfg: RunConfig, args) -> int:
    reference_files = _expand_files(args.reference)
    sample_files = [f for path in args.samples for f in _expand_files(path)]
    if not sample_files:
        raise SystemExit("no sample files given")
    result = run_analysis(cfg, reference_files, {"samples": sample_files}, args.out)
    _say(args, result["report"])
    if cfg["analysis.chemistry"]:
        _chemistry(cfg, args, sample_files)
    return 0


def _chemistry(cfg: RunConfig, args, sample_files: list[str]) -> None:
    data = fileio.read_tct(sample_files[0])
    if data.labels is None or any(label not in worlds.RESIDUE_ATOMS for label in data.labels):
        _say(args, "chemistry report skipped: trajectories carry no protein topology")
        return
    topology = worlds.ProteinTopology(tuple(data.labels))
    radii = worlds.load_vdw_radii()
    totals = {"clash_count": 0, "n_frames": 0}
    length_hist = None
    angle_hist = None
    for path in sample_files:
        data = fileio.read_tct(path)
        for t in range(data.n_frames):
            coords = worlds.flatten_atoms(worlds.decode_protein(data.cloud(t), topology))
            rep = ana.chemistry_report(coords, topology, radii)
            totals["clash_count"] += rep["clash_count"]
            totals["n_frames"] += 1
            lh = rep["bond_length_hist"][1]
            ah = rep["bond_angle_hist"][1]
            length_hist = lh if length_hist is None else length_hist + lh
            angle_hist = ah if angle_hist is None else angle_hist + ah
    out = os.path.join(args.out, "chemistry.txt")
    with open(out, "w") as fh:
        fh.write(f"frames analyzed: {totals['n_frames']}\n")
        fh.write(f"total clashes:  {totals['clash_count']}\n")
        fh.write("bond length histogram (counts): " +
                 " ".join(str(int(v)) for v in length_hist) + "\n")
        fh.write("bond angle histogram (counts): " +
                 " ".join(str(int(v)) for v in angle_hist) + "\n")
    _say(args, f"chemistry report at {out}")


# ---------------------------------------------------------------------------
# compare-transports
# ---------------------------------------------------------------------------


def cmd_compare_transports(cfg: RunConfig, args) -> int:
    os.makedirs(args.out, exist_ok=True)
    kinds = [args.kind] if args.kind else list(cfg["compare.kinds"])
    grid = list(cfg["compare.sigma_p_grid"])
    reference_files = _expand_files(args.reference)
    sample_sets: dict[str, list[str]] = {}
    for kind in kinds:
        for sigma_p in grid:
            tag = f"{kind}_sp{sigma_p:g}"
            sub = os.path.join(args.out, tag)
            os.makedirs(sub, exist_ok=True)
            run_cfg = RunConfig(dict(cfg.values), cfg.base_dir)
            run_cfg.set("schedule.kind", kind)
            run_cfg.set("schedule.sigma_p", sigma_p)
            train_args = argparse.Namespace(out=sub, data=args.data, resume=None,
                                            seed=args.seed, quiet=True)
            cmd_train(run_cfg, train_args)
            sample_args = argparse.Namespace(
                out=os.path.join(sub, "samples"),
                checkpoint=os.path.join(sub, "checkpoint.tjck"),
                start=args.start, start_frame=0, seed=args.seed, eps=None,
                dtau_steps=None, n_steps=None, n_trajectories=None, quiet=True,
            )
            cmd_sample(run_cfg, sample_args)
            sample_sets[tag] = _expand_files(os.path.join(sub, "samples"))
            _say(args, f"finished transport {tag}")
    result = run_analysis(cfg, reference_files, sample_sets, args.out)
    _say(args, result["report"])
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(cfg: RunConfig, args) -> int:
    os.makedirs(args.out, exist_ok=True)
    reference_files = _expand_files(args.reference)
    sample_sets: dict[str, list[str]] = {}
    grid: list[tuple[str, float, int]] = []
    for eps in cfg["sweep.eps_grid"]:
        for steps in cfg["sweep.steps_grid"]:
            tag = f"eps{eps:g}_n{steps}"
            grid.append((tag, float(eps), int(steps)))
            sub = os.path.join(args.out, tag)
            run_cfg = RunConfig(dict(cfg.values), cfg.base_dir)
            run_cfg.set("sample.eps", float(eps))
            run_cfg.set("sample.steps", int(steps))
            run_cfg.set("sample.n_trajectories", cfg["sweep.n_trajectories"])
            run_cfg.set("sample.n_steps", cfg["sweep.n_steps"])
            sample_args = argparse.Namespace(
                out=sub, checkpoint=args.checkpoint, start=args.start, start_frame=0,
                seed=args.seed, eps=None, dtau_steps=None, n_steps=None,
                n_trajectories=None, quiet=True,
            )
            cmd_sample(run_cfg, sample_args)
            sample_sets[tag] = _expand_files(sub)
            _say(args, f"finished {tag}")
    result = run_analysis(cfg, reference_files, sample_sets, args.out)
    js = result["js"]
    with open(os.path.join(args.out, "sweep_table.txt"), "w") as fh:
        fh.write("eps steps " + " ".join(k for k in js) + "\n")
        for tag, eps, steps in grid:
            row = [f"{eps:g}", str(steps)]
            for obs_name in js:
                v = js[obs_name].get(tag)
                row.append("n/a" if v is None else f"{v:.4f}")
            fh.write(" ".join(row) + "\n")
    _say(args, result["report"])
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", default=None, help="flat key=value config file")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--deterministic", action="store_true",
                     help="accepted for compatibility; runs are always deterministic")
    sub.add_argument("--threads", type=int, default=None,
                     help="cap worker threads (single-process commands ignore this)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--sigma-p", type=float, default=None, dest="sigma_p",
                     help="override schedule.sigma_p")
    sub.add_argument("--sigma-v", type=float, default=None, dest="sigma_v",
                     help="override schedule.sigma_v")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tensorjump",
                                     description="equivariant generative transport "
                                                 "for stochastic dynamics")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="simulate a toy world and index training pairs")
    _add_common(p)

    p = commands.add_parser("train", help="train the transport on generated pairs")
    _add_common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = commands.add_parser("sample", help="roll out trajectories from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", required=True, help="trajectory file supplying start frames")
    p.add_argument("--start-frame", type=int, default=0, dest="start_frame")
    p.add_argument("--eps", type=float, default=None, help="override sample.eps")
    p.add_argument("--dtau-steps", type=int, default=None, dest="dtau_steps",
                   help="override sample.steps (latent integration steps)")
    p.add_argument("--n-steps", type=int, default=None, dest="n_steps")
    p.add_argument("--n-trajectories", type=int, default=None, dest="n_trajectories")

    p = commands.add_parser("analyze", help="TICA/MSM-reweighted comparison vs reference")
    _add_common(p)
    p.add_argument("--reference", required=True, help="reference .tct file or directory")
    p.add_argument("samples", nargs="+", help="sample .tct files or directories")

    p = commands.add_parser("compare-transports",
                            help="train and evaluate all schedule kinds under one budget")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--start", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--kind", default=None, help="run a single schedule kind")

    p = commands.add_parser("sweep", help="sampling-parameter grid (eps x integration steps)")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", required=True)
    p.add_argument("--reference", required=True)

    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    if args.sigma_p is not None:
        cfg.set("schedule.sigma_p", args.sigma_p)
    if args.sigma_v is not None:
        cfg.set("schedule.sigma_v", args.sigma_v)
    if args.threads is not None and args.threads > 0:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))

    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "sample": cmd_sample,
        "analyze": cmd_analyze,
        "compare-transports": cmd_compare_transports,
        "sweep": cmd_sweep,
    }
    return handlers[args.command](cfg, args)


if __name__ == "__main__":
    raise SystemExit(main())
