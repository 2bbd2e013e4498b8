"""Generative transport between consecutive simulation frames.

Four interpolant families share one latent construction
``X_tau = a0(tau) X0 + a1(tau) X1 + gamma(tau) Z`` and one pair of
samplers.  The bridging family connects the data frame at tau=0 to the
next frame at tau=1 with a noise bump that vanishes at both ends; the
prior families (one-sided, flow matching, variance-preserving
denoising) start from a Gaussian draw instead, but are still
conditioned on the data frame through the conditioner network.

The SDE sampler integrates
``dX = (b - eps/gamma * eta) dtau + sqrt(2 eps dtau) Z`` with Z drawn at
the configured modality variances; the score division is clamped away
from the gamma zeros and the final step omits the stochastic kick.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import network as net
from .cloud import NoiseScales, TensorCloud, axpy, sample_gaussian, zeros_like
from .network import CloudBatch, NetworkConfig

KINDS = ("two_sided", "one_sided", "ddpm", "flow_matching")


@dataclass(frozen=True)
class InterpolantSchedule:
    """Coefficients, endpoint rule and heads-in-use of one transport family."""

    kind: str
    scales: NoiseScales

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    # latent-state coefficients --------------------------------------------
    def a0(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind in ("two_sided", "flow_matching"):
            return 1.0 - tau
        return np.zeros_like(tau)

    def a1(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "ddpm":
            return np.sin(0.5 * np.pi * tau)
        return tau

    def a0_dot(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind in ("two_sided", "flow_matching"):
            return -np.ones_like(tau)
        return np.zeros_like(tau)

    def a1_dot(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "ddpm":
            return 0.5 * np.pi * np.cos(0.5 * np.pi * tau)
        return np.ones_like(tau)

    def gamma(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "two_sided":
            return tau * (1.0 - tau)
        if self.kind == "one_sided":
            return 1.0 - tau
        if self.kind == "ddpm":
            return np.cos(0.5 * np.pi * tau)
        return np.zeros_like(tau)

    def gamma_dot(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "two_sided":
            return 1.0 - 2.0 * tau
        if self.kind == "one_sided":
            return -np.ones_like(tau)
        if self.kind == "ddpm":
            return -0.5 * np.pi * np.sin(0.5 * np.pi * tau)
        return np.zeros_like(tau)

    def epsilon(self, tau):
        """Base diffusion coefficient; constant 1, rescaled by SampleConfig."""
        return np.ones_like(np.asarray(tau, dtype=np.float64))

    # wiring ----------------------------------------------------------------
    @property
    def source(self) -> str:
        return "data" if self.kind == "two_sided" else "prior"

    @property
    def heads_used(self) -> str:
        if self.kind == "flow_matching":
            return "drift-only"
        if self.kind == "ddpm":
            return "noise-only"
        return "drift+noise"

    def head_names(self) -> tuple[str, ...]:
        if self.heads_used == "drift-only":
            return ("drift_v", "drift_p")
        if self.heads_used == "noise-only":
            return ("noise_v", "noise_p")
        return net.HEAD_NAMES

    def needs_prior_endpoint(self) -> bool:
        # one_sided and ddpm carry the prior inside gamma(0) * Z already
        return self.kind == "flow_matching"

    def stochastic(self) -> bool:
        return self.kind != "flow_matching"

    def gamma_floor(self, dtau: float) -> float:
        """Positive clamp for the score division near the gamma zeros."""
        if self.kind == "two_sided":
            return float(self.gamma(0.5 * dtau))
        return float(self.gamma(1.0 - 0.5 * dtau))


def make_schedule(kind: str, scales: NoiseScales | None = None) -> InterpolantSchedule:
    return InterpolantSchedule(kind, scales or NoiseScales())


# ---------------------------------------------------------------------------
# interpolation (single clouds)
# ---------------------------------------------------------------------------


def interpolate(x0: TensorCloud, x1: TensorCloud, z: TensorCloud, tau: float,
                schedule: InterpolantSchedule) -> TensorCloud:
    """Latent state at tau; the endpoints are returned bitwise exactly."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0 and schedule.kind == "two_sided":
        return x0.copy()
    if tau == 1.0:
        return x1.copy()
    acc = axpy(float(schedule.a0(tau)), x0, zeros_like(x0))
    acc = axpy(float(schedule.a1(tau)), x1, acc)
    return axpy(float(schedule.gamma(tau)), z, acc)


def target_velocity(x0: TensorCloud, x1: TensorCloud, z: TensorCloud, tau: float,
                    schedule: InterpolantSchedule) -> TensorCloud:
    """Regression target of the drift head at tau."""
    acc = axpy(float(schedule.a0_dot(tau)), x0, zeros_like(x0))
    acc = axpy(float(schedule.a1_dot(tau)), x1, acc)
    return axpy(float(schedule.gamma_dot(tau)), z, acc)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 1000
    lr_start: float = 1e-2
    lr_end: float = 1e-3
    decay_steps: int = 150_000
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.total_steps, self.decay_steps) < 1:
            raise ValueError("batch size and step counts must be positive")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_end > self.lr_start:
            raise ValueError("the schedule decays: lr_end must not exceed lr_start")

    def lr(self, step: int) -> float:
        if step >= self.decay_steps:
            return self.lr_end
        frac = step / self.decay_steps
        return self.lr_start + (self.lr_end - self.lr_start) * frac


def init_adam_state(params: dict) -> dict:
    flat = net.pack_params(params)
    return {"m": np.zeros_like(flat), "v": np.zeros_like(flat), "step": 0}


_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def train_step(params: dict, batch, schedule: InterpolantSchedule, opt_state: dict,
               rng: np.random.Generator, cfg: NetworkConfig,
               tconfig: TrainConfig) -> tuple[dict, dict, float]:
    """One Adam update of the combined drift+noise objective."""
    loss, grad = net.loss_and_grad(params, batch, schedule, rng, cfg)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient; aborting update")
    step = opt_state["step"] + 1
    m = _ADAM_B1 * opt_state["m"] + (1 - _ADAM_B1) * grad
    v = _ADAM_B2 * opt_state["v"] + (1 - _ADAM_B2) * grad * grad
    m_hat = m / (1 - _ADAM_B1**step)
    v_hat = v / (1 - _ADAM_B2**step)
    flat = net.pack_params(params) - tconfig.lr(step) * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite parameter update; aborting")
    new_params = net.unpack_params(flat, params)
    return new_params, {"m": m, "v": v, "step": step}, loss


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 100
    eps_scale: float = 1.0
    gamma_floor: float | None = None  # derived from the step size when None
    noiseless_final: bool = True
    literal_noise_kick: bool = False  # drop the sqrt(dtau) on the kick
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one integration step")
        if self.gamma_floor is not None and self.gamma_floor <= 0:
            raise ValueError("gamma clamp floor must be positive")
        if self.eps_scale < 0:
            raise ValueError("eps scale must be non-negative")


def _batch_axpy(a, x: CloudBatch, y: CloudBatch | None) -> CloudBatch:
    a = np.asarray(a, dtype=np.float64)
    af = a[..., None, None, None] if a.ndim == 1 else a
    ap = a[..., None, None] if a.ndim == 1 else a
    feats = {}
    for l, v in x.features.items():
        term = af * ad.value_of(v)
        feats[l] = term if y is None else term + ad.value_of(y.features[l])
    pos = ap * ad.value_of(x.positions)
    if y is not None:
        pos = pos + ad.value_of(y.positions)
    return CloudBatch(feats, pos)


def _drift_batch(heads: dict, x: CloudBatch, tau: float, dtau: float,
                 schedule: InterpolantSchedule, eps: float,
                 floor: float) -> CloudBatch:
    """Effective integration drift for the given family at latent time tau."""
    if schedule.kind == "flow_matching":
        return net.head_cloud(heads, "drift")
    if schedule.kind == "ddpm":
        eta = net.head_cloud(heads, "noise")
        a1 = float(schedule.a1(tau))
        a1_dot = float(schedule.a1_dot(tau))
        g = float(schedule.gamma(tau))
        g_dot = float(schedule.gamma_dot(tau))
        a1c = max(a1, float(schedule.a1(0.5 * dtau)))
        drift = _batch_axpy(a1_dot / a1c, x, None)
        drift = _batch_axpy(g_dot - a1_dot * g / a1c - eps / max(g, floor), eta, drift)
        return drift
    drift = net.head_cloud(heads, "drift")
    if eps == 0.0:
        return drift
    eta = net.head_cloud(heads, "noise")
    g = max(float(schedule.gamma(tau)), floor)
    return _batch_axpy(-eps / g, eta, drift)


def _heads_needed(schedule: InterpolantSchedule, eps: float) -> tuple[str, ...]:
    if schedule.kind == "flow_matching":
        return ("drift_v", "drift_p")
    if schedule.kind == "ddpm":
        return ("noise_v", "noise_p")
    if eps == 0.0:
        return ("drift_v", "drift_p")
    return net.HEAD_NAMES


class _NoiseSource:
    """Per-trajectory latent noise, drawn in blocks of one physical step."""

    def __init__(self, spec, n_nodes: int, scales: NoiseScales, rngs, mask=None):
        self.spec = spec
        self.n = n_nodes
        self.scales = scales
        self.rngs = rngs
        self.mask = mask
        self.feat_dim = spec.dim * n_nodes
        self.block = None
        self.cursor = 0

    def new_block(self, n_draws: int) -> None:
        size = self.feat_dim + 3 * self.n
        self.block = np.stack([rng.normal(size=(n_draws, size)) for rng in self.rngs], axis=1)
        self.cursor = 0

    def next(self) -> CloudBatch:
        row = self.block[self.cursor]  # (B, size)
        self.cursor += 1
        b = row.shape[0]
        feats = {}
        offset = 0
        sig_v = float(np.sqrt(self.scales.var_features))
        for l, h in self.spec.entries:
            size = h * (2 * l + 1)
            chunk = row[:, offset : offset + size * self.n]
            feats[l] = sig_v * chunk.reshape(b, self.n, h, 2 * l + 1)
            if self.mask is not None:
                feats[l] = feats[l] * np.asarray(self.mask[l], dtype=float)[None, :, :, None]
            offset += size * self.n
        sig_p = float(np.sqrt(self.scales.var_positions))
        pos = sig_p * row[:, offset:].reshape(b, self.n, 3)
        return CloudBatch(feats, pos)


def _integrate_latent(cond: CloudBatch, start: CloudBatch, params: dict,
                      schedule: InterpolantSchedule, cfg: NetworkConfig,
                      sample_cfg: SampleConfig, noise: _NoiseSource) -> CloudBatch:
    steps = sample_cfg.steps
    dtau = 1.0 / steps
    eps = sample_cfg.eps_scale
    floor = sample_cfg.gamma_floor
    if floor is None:
        floor = max(schedule.gamma_floor(dtau), 1e-12)
    x = start
    b = ad.value_of(start.positions).shape[0]
    for i in range(steps):
        tau = i * dtau
        last = i == steps - 1
        # the final step lands the state on the learned manifold: no kick
        # and no score correction (the 1/gamma clamp there is pure artifact)
        eps_tau = 0.0 if (last and sample_cfg.noiseless_final) else \
            eps * float(schedule.epsilon(tau))
        heads = net.heads_forward_batched(cond, x, np.full(b, tau), params, cfg,
                                          heads=_heads_needed(schedule, eps_tau))
        drift = _drift_batch(heads, x, tau, dtau, schedule, eps_tau, floor)
        if noise.mask is not None:
            drift = CloudBatch(
                {l: drift.features[l] * np.asarray(noise.mask[l], dtype=float)[None, :, :, None]
                 for l in drift.features},
                drift.positions,
            )
        x = _batch_axpy(dtau, drift, x)
        if schedule.stochastic() and eps > 0.0:
            z = noise.next()  # keep the stream aligned whether or not the kick lands
            if eps_tau > 0.0:
                amp = np.sqrt(2.0 * eps_tau) if sample_cfg.literal_noise_kick else np.sqrt(
                    2.0 * eps_tau * dtau
                )
                x = _batch_axpy(amp, z, x)
        if not (np.all(np.isfinite(ad.value_of(x.positions)))
                and all(np.all(np.isfinite(ad.value_of(v))) for v in x.features.values())):
            raise FloatingPointError(f"non-finite latent state at tau={tau + dtau:.6f}")
    return x


def generate_next_batched(label_ids: np.ndarray, x_t: CloudBatch, params: dict,
                          schedule: InterpolantSchedule, cfg: NetworkConfig,
                          sample_cfg: SampleConfig, noise: _NoiseSource,
                          cond_input: CloudBatch | None = None) -> CloudBatch:
    cond = net.condition_batched(label_ids, cond_input if cond_input is not None else x_t,
                                 params, cfg)
    if schedule.source == "data":
        start = x_t
    else:
        start = noise.next()
    return _integrate_latent(cond, start, params, schedule, cfg, sample_cfg, noise)


def _noise_for(rng: np.random.Generator, x: TensorCloud, schedule: InterpolantSchedule,
               sample_cfg: SampleConfig) -> _NoiseSource:
    src = _NoiseSource(x.spec, x.n_nodes, schedule.scales, [rng], mask=x.mask)
    src.new_block(sample_cfg.steps + 1)  # prior draw + one kick per step
    return src


def generate_next(labels, x_t: TensorCloud, params: dict, schedule: InterpolantSchedule,
                  cfg: NetworkConfig, sample_cfg: SampleConfig, rng: np.random.Generator,
                  cond: TensorCloud | None = None) -> TensorCloud:
    """Integrate the latent transport from the current frame to the next."""
    ids = cfg.label_ids(labels)
    batch = CloudBatch.stack([x_t])
    cond_batch = CloudBatch.stack([cond]) if cond is not None else None
    noise = _noise_for(rng, x_t, schedule, sample_cfg)
    out = generate_next_batched(ids, batch, params, schedule, cfg, sample_cfg, noise,
                                cond_input=cond_batch)
    return out.unstack(cfg.state_spec, mask=x_t.mask)[0]


def sample_step_sde(cond_cloud: TensorCloud, x_tau: TensorCloud, tau: float, dtau: float,
                    params: dict, schedule: InterpolantSchedule, cfg: NetworkConfig,
                    rng: np.random.Generator, eps_scale: float = 1.0,
                    gamma_floor: float | None = None,
                    with_kick: bool = True) -> TensorCloud:
    """One Euler-Maruyama step of the latent SDE."""
    if not (0.0 <= tau and tau + dtau <= 1.0 + 1e-12):
        raise ValueError("step leaves the unit interval")
    floor = gamma_floor if gamma_floor is not None else max(schedule.gamma_floor(dtau), 1e-12)
    cond_b = CloudBatch.stack([cond_cloud])
    x_b = CloudBatch.stack([x_tau])
    eps = eps_scale * float(schedule.epsilon(tau))
    heads = net.heads_forward_batched(cond_b, x_b, np.asarray([tau]), params, cfg,
                                      heads=_heads_needed(schedule, eps))
    drift = _drift_batch(heads, x_b, tau, dtau, schedule, eps, floor)
    out = _batch_axpy(dtau, drift, x_b)
    if schedule.stochastic() and eps > 0.0 and with_kick:
        z = sample_gaussian(x_tau.spec, x_tau.n_nodes, schedule.scales, rng, mask=x_tau.mask)
        out = _batch_axpy(np.sqrt(2.0 * eps * dtau), CloudBatch.stack([z]), out)
    cloud = out.unstack(x_tau.spec, mask=x_tau.mask)[0]
    for arr in (cloud.positions, *cloud.features.values()):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite latent state at tau={tau:.6f}")
    return cloud


def sample_step_ode(cond_cloud: TensorCloud, x_tau: TensorCloud, tau: float, dtau: float,
                    params: dict, schedule: InterpolantSchedule,
                    cfg: NetworkConfig) -> TensorCloud:
    """Deterministic Euler step along the learned velocity field."""
    rng = np.random.default_rng(0)  # never consumed with eps=0
    return sample_step_sde(cond_cloud, x_tau, tau, dtau, params, schedule, cfg, rng,
                           eps_scale=0.0)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Ordered frames plus topology metadata and rollout bookkeeping."""

    labels: tuple[str, ...]
    frames: list[TensorCloud]
    frame_interval: float = 1.0
    status: str = "ok"
    step_seconds: list[float] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def rollout(labels, x0: TensorCloud, n_steps: int, params: dict,
            schedule: InterpolantSchedule, cfg: NetworkConfig, sample_cfg: SampleConfig,
            rng: np.random.Generator, frame_interval: float = 1.0,
            conditioning=None, project=None) -> Trajectory:
    """Iterate generate_next; truncates (with status) on non-finite frames."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    trajs = rollout_ensemble(labels, [x0], n_steps, params, schedule, cfg, sample_cfg,
                             rngs=[rng], frame_interval=frame_interval,
                             conditioning=conditioning, project=project)
    return trajs[0]


def rollout_ensemble(labels, starts: list[TensorCloud], n_steps: int, params: dict,
                     schedule: InterpolantSchedule, cfg: NetworkConfig,
                     sample_cfg: SampleConfig, seed: int | None = None, rngs=None,
                     frame_interval: float = 1.0, conditioning=None,
                     project=None) -> list[Trajectory]:
    """Integrate many independent trajectories in one stacked batch.

    Each trajectory owns an rng stream derived from (seed, index), so a
    run is reproducible regardless of how the ensemble is chunked.
    `conditioning` maps a state cloud to the cloud the conditioner sees
    (worlds use it to re-supply static frame features each step);
    `project` maps each generated cloud back onto the world's state
    manifold before it is stored and fed forward.
    """
    if rngs is None:
        if seed is None:
            raise ValueError("either seed or explicit rng streams are required")
        rngs = [np.random.default_rng(np.random.SeedSequence((seed, j)))
                for j in range(len(starts))]
    ids = cfg.label_ids(labels)
    if ids.shape[0] == 1 and len(starts) > 1:
        ids = np.repeat(ids, len(starts), axis=0)
    mask = starts[0].mask
    batch = CloudBatch.stack(starts)
    noise = _NoiseSource(cfg.state_spec, batch.positions.shape[1], schedule.scales,
                         rngs, mask=mask)
    frames = [batch]
    step_seconds: list[float] = []
    status = "ok"
    for _ in range(n_steps):
        tic = time.perf_counter()
        noise.new_block(sample_cfg.steps + 1)
        cond_batch = None
        if conditioning is not None:
            cond_batch = CloudBatch.stack([
                conditioning(c) for c in batch.unstack(cfg.state_spec, mask=mask)
            ])
        try:
            batch = generate_next_batched(ids, batch, params, schedule, cfg, sample_cfg,
                                          noise, cond_input=cond_batch)
        except FloatingPointError:
            status = "truncated"
            break
        if project is not None:
            batch = CloudBatch.stack([
                project(c) for c in batch.unstack(cfg.state_spec, mask=mask)
            ])
        frames.append(batch)
        step_seconds.append(time.perf_counter() - tic)
    label_row = tuple(np.atleast_2d(np.asarray(labels, dtype=object))[0])
    out = []
    for j in range(len(starts)):
        clouds = [
            TensorCloud(cfg.state_spec, {l: f.features[l][j] for l in f.features},
                        f.positions[j], mask)
            for f in frames
        ]
        out.append(Trajectory(label_row, clouds, frame_interval=frame_interval,
                              status=status, step_seconds=list(step_seconds)))
    return out