"""Prototype of the desk-scale end-to-end run (not part of the package)."""
import time
import numpy as np
from tensorjump import analysis as ana, network as net, transport as tp, worlds
from tensorjump.cloud import NoiseScales

t_start = time.perf_counter()
rng = np.random.default_rng(0)

pot = worlds.DoubleWell2D(a=2.0, k=4.0)
world = worlds.build_world(pot)
kT, dt, lag = 1.0, 0.01, 4

bd = worlds.BdConfig(dt=dt, kT=kT, friction=1.0, steps=20000, stride=1)
ds = worlds.generate_dataset(pot, bd, 16, lag, np.random.default_rng(1))
states = ds.states
n_traj, n_frames, _ = states.shape
x = states[:, :, 0]
hops = (np.sign(x[:, lag:]) != np.sign(x[:, :-lag])).mean()
print(f"dataset: {len(ds)} pairs, hop prob/lag {hops:.4f}, {time.perf_counter()-t_start:.1f}s", flush=True)

cfg = net.NetworkConfig(state_spec=world.spec, vocab=("PARTICLE", "ANCHOR"),
                        hidden_mult=8, lmax=1, k_neighbors=1, layers_cond=2,
                        layers_header=2, n_radial=8, radial_cutoff=6.0)
params = net.init_params(cfg, seed=0)
print("params:", net.pack_params(params).size, flush=True)
schedule = tp.make_schedule("two_sided", NoiseScales(1.0, 1.0))
TOTAL = 8000
tcfg = tp.TrainConfig(batch_size=32, total_steps=TOTAL, lr_start=3e-3, lr_end=3e-4,
                      decay_steps=TOTAL)

opt = tp.init_adam_state(params)
t0 = time.perf_counter()
for step in range(1, TOTAL + 1):
    srng = np.random.default_rng(np.random.SeedSequence((7, step)))
    js = srng.integers(0, n_traj, size=tcfg.batch_size)
    ts = srng.integers(0, n_frames - lag, size=tcfg.batch_size)
    batch = [(world.labels, world.encode(states[j, t]), world.encode(states[j, t + lag]))
             for j, t in zip(js, ts)]
    params, opt, loss = tp.train_step(params, batch, schedule, opt, srng, cfg, tcfg)
    if step % 1000 == 0 or step == 1:
        print(f"step {step} loss {loss:.4f} ({(time.perf_counter()-t0)/step*1000:.0f} ms/step)", flush=True)
print(f"train {time.perf_counter()-t0:.0f}s", flush=True)

sample_cfg = tp.SampleConfig(steps=32, eps_scale=1.0)
start_states = states[rng.integers(0, n_traj, 200), rng.integers(0, n_frames, 200)]
starts = world.encode_batch(start_states)
t0 = time.perf_counter()
trajs = tp.rollout_ensemble(list(world.labels), starts, 500, params, schedule, cfg,
                            sample_cfg, seed=42)
print(f"sampling {time.perf_counter()-t0:.0f}s status={set(t.status for t in trajs)}", flush=True)
samp = np.stack([[world.decode(f) for f in t.frames] for t in trajs])  # (200, 501, 2)
print("frac right well:", (samp[..., 0] > 0).mean(), " mean y^2:", (samp[..., 1]**2).mean(), flush=True)

ref_bd = worlds.BdConfig(dt=dt, kT=kT, friction=1.0, steps=100000, stride=10 * lag)
x0 = np.random.default_rng(3).normal(scale=0.4, size=(100, 2))
x0[:50, 0] += 1.0
x0[50:, 0] -= 1.0
ref = worlds.simulate(pot, ref_bd, x0, np.random.default_rng(4))
ref = ref[ref.shape[0] // 20:]
ref_states = np.moveaxis(ref, 0, 1)
print("reference:", ref_states.shape, flush=True)

tica = ana.tica_fit([ref_states[j] for j in range(ref_states.shape[0])], lag=1)
ref_tics = [ana.tica_project(tica, ref_states[j], 2) for j in range(ref_states.shape[0])]
centers, _ = ana.kmeans(np.concatenate(ref_tics), 20, seed=0)

def assign(tics):
    return ((tics[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)

def reweighted(series_tics, values_list, lag_frames, bins):
    labels = [assign(s) for s in series_tics]
    msm = ana.msm_estimate(labels, lag=lag_frames, n_states=20)
    _, dens = ana.reweight_histogram(np.concatenate(values_list), np.concatenate(labels),
                                     msm, bins)
    return dens

samp_tics = [ana.tica_project(tica, samp[j], 2) for j in range(samp.shape[0])]
for obs, ref_vals, samp_vals in [
    ("TIC1", [t[:, 0] for t in ref_tics], [t[:, 0] for t in samp_tics]),
    ("RG", [np.linalg.norm(ref_states[j], axis=1) / 2 for j in range(ref_states.shape[0])],
           [np.linalg.norm(samp[j], axis=1) / 2 for j in range(samp.shape[0])]),
]:
    bins = ana.shared_bins(np.concatenate(ref_vals), samp_vals, 64)
    dens_ref = reweighted(ref_tics, ref_vals, 4, bins)
    dens_samp = reweighted(samp_tics, samp_vals, 40, bins)
    print(f"JS({obs}) = {ana.js_divergence(dens_ref, dens_samp):.4f}", flush=True)
print(f"total {time.perf_counter()-t_start:.0f}s", flush=True)
