"""Probe single-step transport quality and iterated stability (new design)."""
import os
import time
import numpy as np
from tensorjump import network as net, transport as tp, worlds
from tensorjump.cloud import NoiseScales

pot = worlds.DoubleWell(a=2.0, k=4.0)
world = worlds.build_world(pot)
dt, lag = 0.01, 4
bd = worlds.BdConfig(dt=dt, kT=1.0, friction=1.0, steps=20000, stride=1)
ds = worlds.generate_dataset(pot, bd, 16, lag, np.random.default_rng(1))
states = ds.states
n_traj, n_frames, _ = states.shape

cfg = net.NetworkConfig(state_spec=world.spec, cond_spec=world.cond_spec,
                        vocab=("PARTICLE", "ANCHOR"),
                        hidden_mult=8, lmax=1, k_neighbors=1, layers_cond=2,
                        layers_header=2, n_radial=8, radial_cutoff=6.0)
schedule = tp.make_schedule("two_sided", NoiseScales(1.0, 1.0))
params = net.init_params(cfg, seed=0)
print("params:", net.pack_params(params).size, flush=True)

if os.path.exists("scratch_params2.npz"):
    params = net.unpack_params(np.load("scratch_params2.npz")["flat"], params)
    print("loaded params", flush=True)
else:
    TOTAL = 12000
    tcfg = tp.TrainConfig(batch_size=32, total_steps=TOTAL, lr_start=3e-3, lr_end=1e-3,
                          decay_steps=TOTAL)
    opt = tp.init_adam_state(params)
    t0 = time.perf_counter()
    for step in range(1, TOTAL + 1):
        srng = np.random.default_rng(np.random.SeedSequence((7, step)))
        js = srng.integers(0, n_traj, size=tcfg.batch_size)
        ts = srng.integers(0, n_frames - lag, size=tcfg.batch_size)
        batch = []
        for j, t in zip(js, ts):
            x0c = world.encode(states[j, t])
            batch.append((world.labels, x0c, world.encode(states[j, t + lag]),
                          world.conditioning(x0c)))
        params, opt, loss = tp.train_step(params, batch, schedule, opt, srng, cfg, tcfg)
        if step % 500 == 0:
            print(f"step {step} loss {loss:.3f}", flush=True)
    np.savez("scratch_params2.npz", flat=net.pack_params(params))
    print(f"train {time.perf_counter()-t0:.0f}s", flush=True)

# single-step quality vs BD ground truth
for x0 in ([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-1.2, 0.5, -0.2]):
    x0 = np.asarray(x0)
    reps = 4000
    bd1 = worlds.BdConfig(dt=dt, kT=1.0, friction=1.0, steps=lag, stride=lag)
    truth = worlds.simulate(pot, bd1, np.tile(x0, (reps, 1)), np.random.default_rng(11))[-1]
    starts = world.encode_batch(np.tile(x0, (200, 1)))
    for eps, steps in ((0.3, 16), (0.3, 24), (0.5, 24)):
        sc = tp.SampleConfig(steps=steps, eps_scale=eps)
        trajs = tp.rollout_ensemble(list(world.labels), starts, 1, params, schedule,
                                    cfg, sc, seed=99, conditioning=world.conditioning)
        ok = [t.status for t in trajs].count("ok")
        if ok < len(trajs):
            print(f"x0={x0} eps={eps} steps={steps}: {ok}/200 ok", flush=True)
            continue
        gen = np.stack([world.decode(t.frames[1]) for t in trajs])
        print(f"x0={x0[:2]} eps={eps} n={steps}: truth m {truth.mean(0)[:2].round(3)} "
              f"s {truth.std(0)[:2].round(3)} | model m {gen.mean(0)[:2].round(3)} "
              f"s {gen.std(0)[:2].round(3)}", flush=True)

# iterated rollout
start_states = states[np.random.default_rng(5).integers(0, n_traj, 50),
                      np.random.default_rng(6).integers(0, n_frames, 50)]
starts = world.encode_batch(start_states)
for eps, steps in ((0.3, 16), (0.3, 24), (0.5, 24), (0.5, 32)):
    sc = tp.SampleConfig(steps=steps, eps_scale=eps)
    t0 = time.perf_counter()
    trajs = tp.rollout_ensemble(list(world.labels), starts, 300, params, schedule,
                                cfg, sc, seed=42, conditioning=world.conditioning)
    ok = [t.status for t in trajs].count("ok")
    samp = np.stack([world.decode_frames(t.frames) for t in trajs if t.status == "ok"]) \
        if ok else np.zeros((1, 1, 3))
    burn = samp[:, 75:]
    print(f"eps={eps} steps={steps}: ok {ok}/50 ({time.perf_counter()-t0:.0f}s), "
          f"x var {burn[...,0].var():.3f}, y var {burn[...,1].var():.3f}, "
          f"z var {burn[...,2].var():.3f}, frac right {(burn[...,0]>0).mean():.3f}",
          flush=True)
print("data: x var", states[..., 0].var(), "y var", states[..., 1].var(),
      "z var", states[..., 2].var())
