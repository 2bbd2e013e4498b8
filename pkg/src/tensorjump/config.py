"""Flat key=value run configuration.

One config file is the full experiment record: world, model, schedule,
training, sampling and analysis settings live under dotted keys with
documented defaults.  Unknown keys are rejected; path-valued keys are
resolved relative to the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(";", ",").split(",") if tok.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(";", ",").split(",") if tok.strip())


def _parse_strs(text: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


_PARSERS = {
    bool: _parse_bool,
    int: int,
    float: float,
    str: str,
    "floats": _parse_floats,
    "ints": _parse_ints,
    "strs": _parse_strs,
    "path": str,
}

# key -> (default, type); the single source of truth for the config surface
DEFAULTS: dict[str, tuple] = {
    "seed": (0, int),
    "threads": (0, int),
    "deterministic": (True, bool),
    # world -----------------------------------------------------------------
    "world.kind": ("double_well", str),
    "world.a": (2.0, float),
    "world.k": (4.0, float),
    "world.tilt": (0.0, float),
    "world.n_beads": (4, int),
    "world.spring_k": (4.0, float),
    "world.rest_length": (1.0, float),
    "world.centers": ((0.0, 0.0, 0.0), "floats"),
    "world.weights": ((1.0,), "floats"),
    "world.widths": ((1.0,), "floats"),
    "world.kT": (1.0, float),
    "world.friction": (1.0, float),
    "world.dt": (0.01, float),
    "world.steps": (20000, int),
    "world.stride": (1, int),
    "world.n_trajectories": (8, int),
    "world.pair_lag": (4, int),
    "world.reference_steps": (0, int),
    "world.reference_walkers": (100, int),
    "world.reference_stride": (10, int),
    # model -----------------------------------------------------------------
    "model.hidden_mult": (8, int),
    "model.lmax": (1, int),
    "model.k_neighbors": (16, int),
    "model.layers_cond": (6, int),
    "model.layers_header": (4, int),
    "model.n_radial": (8, int),
    "model.radial_cutoff": (12.0, float),
    "model.tau_dim": (16, int),
    "model.seed": (0, int),
    # schedule ---------------------------------------------------------------
    "schedule.kind": ("two_sided", str),
    "schedule.sigma_v": (1.0, float),  # variance of feature noise
    "schedule.sigma_p": (3.0, float),  # variance of coordinate noise
    # train -------------------------------------------------------------------
    "train.batch_size": (32, int),
    "train.total_steps": (2000, int),
    "train.lr_start": (1e-2, float),
    "train.lr_end": (1e-3, float),
    "train.decay_steps": (150000, int),
    "train.checkpoint_every": (1000, int),
    "train.log_every": (50, int),
    "train.enhanced_sampling": (False, bool),
    "train.enhanced_clusters": (200, int),
    "train.enhanced_tic_dims": (2, int),
    "train.seed": (0, int),
    # sample ------------------------------------------------------------------
    "sample.steps": (100, int),
    "sample.eps": (1.0, float),
    "sample.gamma_floor": (0.0, float),  # 0 = derived from the step size
    "sample.n_trajectories": (100, int),
    "sample.n_steps": (500, int),
    "sample.literal_kick": (False, bool),
    "sample.seed": (0, int),
    # analysis ----------------------------------------------------------------
    "analysis.featurization": ("auto", str),
    "analysis.state_dims": (2, int),
    "analysis.tica_lag": (1.0, float),  # time units; converted per file interval
    "analysis.n_clusters": (20, int),
    "analysis.msm_lag": (4.0, float),  # time units; converted per file interval
    "analysis.tic_dims": (2, int),
    "analysis.n_bins": (64, int),
    "analysis.kmeans_seed": (0, int),
    "analysis.crystal": ("", "path"),
    "analysis.chemistry": (False, bool),
    # compare-transports --------------------------------------------------------
    "compare.kinds": (("two_sided", "one_sided", "ddpm", "flow_matching"), "strs"),
    "compare.sigma_p_grid": ((1.0, 3.0, 5.0), "floats"),
    # sweep ----------------------------------------------------------------------
    "sweep.eps_grid": ((0.1, 0.3, 0.5, 1.0, 2.0, 3.0, 10.0), "floats"),
    "sweep.steps_grid": ((30, 50, 75, 100, 150, 200, 300), "ints"),
    "sweep.n_trajectories": (50, int),
    "sweep.n_steps": (200, int),
}

_PATH_KEYS = tuple(k for k, (_, t) in DEFAULTS.items() if t == "path")


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    base_dir: str = "."

    def __getitem__(self, key: str):
        if key in self.values:
            return self.values[key]
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key {key!r}")
        return DEFAULTS[key][0]

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        kind = DEFAULTS[key][1]
        value = _PARSERS[kind](raw) if isinstance(raw, str) else raw
        if kind == "path" and value:
            value = os.path.normpath(os.path.join(self.base_dir, value))
        self.values[key] = value

    def describe(self) -> str:
        lines = []
        for key in sorted(DEFAULTS):
            lines.append(f"{key} = {self[key]}")
        return "\n".join(lines)


def load_config(path: str | None) -> RunConfig:
    """Parse a flat key=value document; missing file fields use defaults."""
    cfg = RunConfig(base_dir=os.path.dirname(os.path.abspath(path)) if path else ".")
    if path is None:
        return cfg
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            try:
                cfg.set(key.strip(), raw.strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return cfg
