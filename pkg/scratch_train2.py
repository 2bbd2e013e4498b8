"""Improved training run: enhanced cluster-uniform sampling + longer schedule."""
import time
import numpy as np
from tensorjump import analysis as ana, network as net, transport as tp, worlds
from tensorjump.cloud import NoiseScales

t_all = time.perf_counter()
pot = worlds.DoubleWell(a=2.0, k=4.0)
world = worlds.build_world(pot)
dt, lag = 0.01, 4
bd = worlds.BdConfig(dt=dt, kT=1.0, friction=1.0, steps=20000, stride=1)
ds = worlds.generate_dataset(pot, bd, 16, lag, np.random.default_rng(1))
states = ds.states
n_traj, n_frames, _ = states.shape

# enhanced sampling weights: cluster-uniform over TICs of the source frames
feats = [states[j, :, :2] for j in range(n_traj)]
tica_tr = ana.tica_fit(feats, lag=10)
pair_index = [(j, t) for j in range(n_traj) for t in range(n_frames - lag)]
pair_tics = np.concatenate([ana.tica_project(tica_tr, states[j, :n_frames - lag, :2], 2)
                            for j in range(n_traj)])
weights = ana.cluster_weights_for_training(pair_tics, k=50, seed=0)
print(f"pairs {len(pair_index)}, weight range [{weights.min():.2e}, {weights.max():.2e}]",
      flush=True)

cfg = net.NetworkConfig(state_spec=world.spec, cond_spec=world.cond_spec,
                        vocab=("PARTICLE", "ANCHOR"),
                        hidden_mult=8, lmax=1, k_neighbors=1, layers_cond=2,
                        layers_header=2, n_radial=8, radial_cutoff=6.0)
schedule = tp.make_schedule("two_sided", NoiseScales(1.0, 1.0))
params = net.init_params(cfg, seed=0)
TOTAL = 20000
tcfg = tp.TrainConfig(batch_size=48, total_steps=TOTAL, lr_start=3e-3, lr_end=2e-4,
                      decay_steps=TOTAL)
opt = tp.init_adam_state(params)
t0 = time.perf_counter()
for step in range(1, TOTAL + 1):
    srng = np.random.default_rng(np.random.SeedSequence((7, step)))
    picks = srng.choice(len(pair_index), size=tcfg.batch_size, p=weights)
    batch = []
    for i in picks:
        j, t = pair_index[i]
        x0c = world.encode(states[j, t])
        batch.append((world.labels, x0c, world.encode(states[j, t + lag]),
                      world.conditioning(x0c)))
    params, opt, loss = tp.train_step(params, batch, schedule, opt, srng, cfg, tcfg)
    if step % 2000 == 0:
        print(f"step {step} loss {loss:.3f} ({(time.perf_counter()-t0)/step*1000:.0f} ms)",
              flush=True)
np.savez("scratch_params3.npz", flat=net.pack_params(params))
print(f"train {time.perf_counter()-t0:.0f}s", flush=True)

# evaluation
ref_bd = worlds.BdConfig(dt=dt, kT=1.0, friction=1.0, steps=100000, stride=10 * lag)
x0 = np.random.default_rng(3).normal(scale=0.4, size=(100, 3))
x0[:50, 0] += 1.0
x0[50:, 0] -= 1.0
ref = worlds.simulate(pot, ref_bd, x0, np.random.default_rng(4))
ref = ref[ref.shape[0] // 20:]
ref_states = np.moveaxis(ref, 0, 1)

tica = ana.tica_fit([ref_states[j, :, :2] for j in range(100)], lag=1)
ref_tics = [ana.tica_project(tica, ref_states[j, :, :2], 2) for j in range(100)]
centers, _ = ana.kmeans(np.concatenate(ref_tics), 20, seed=0)

def assign(tics):
    return ((tics[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)

def reweighted(series_tics, values_list, lag_frames, bins):
    labels = [assign(s) for s in series_tics]
    msm = ana.msm_estimate(labels, lag=lag_frames, n_states=20)
    _, dens = ana.reweight_histogram(np.concatenate(values_list), np.concatenate(labels),
                                     msm, bins)
    return dens

ref_vals = {
    "TIC1": [t[:, 0] for t in ref_tics],
    "RG": [np.linalg.norm(ref_states[j], axis=1) / 2 for j in range(100)],
}
start_rng = np.random.default_rng(5)
start_states = states[start_rng.integers(0, n_traj, 200),
                      start_rng.integers(0, n_frames, 200)]
starts = world.encode_batch(start_states)
for eps, steps in ((0.3, 24), (0.2, 24)):
    t0 = time.perf_counter()
    sc = tp.SampleConfig(steps=steps, eps_scale=eps)
    trajs = tp.rollout_ensemble(list(world.labels), starts, 500, params, schedule,
                                cfg, sc, seed=42, conditioning=world.conditioning)
    ok = [t.status for t in trajs].count("ok")
    samp = np.stack([world.decode_frames(t.frames) for t in trajs if t.status == "ok"])
    samp_tics = [ana.tica_project(tica, samp[j, :, :2], 2) for j in range(samp.shape[0])]
    samp_vals = {
        "TIC1": [t[:, 0] for t in samp_tics],
        "RG": [np.linalg.norm(samp[j], axis=1) / 2 for j in range(samp.shape[0])],
    }
    line = [f"eps={eps} steps={steps} ok={ok}/200 ({time.perf_counter()-t0:.0f}s)"]
    for obs in ("TIC1", "RG"):
        bins = ana.shared_bins(np.concatenate(ref_vals[obs]), samp_vals[obs], 64)
        dens_ref = reweighted(ref_tics, ref_vals[obs], 4, bins)
        dens_samp = reweighted(samp_tics, samp_vals[obs], 40, bins)
        line.append(f"JS({obs})={ana.js_divergence(dens_ref, dens_samp):.4f}")
    print("  ".join(line), flush=True)
print(f"total {time.perf_counter()-t_all:.0f}s", flush=True)
