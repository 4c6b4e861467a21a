"""Run-time defaults, flat key=value config files, seeding, and thread caps."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

THREADS_ENV = "COMMITTEE_FORGE_THREADS"

# Every tunable default in one place; a config file may override any of them.
DEFAULTS = {
    # ingestion
    "rescale_method": "bilinear",     # or "pad"
    # deformation
    "sigma": 6.0,
    "alpha": 36.0,
    "max_angle_deg": 15.0,            # rotation/shear bound for most digits
    "similar_angle_deg": 7.5,         # reduced bound for the easily-confused digits 1 and 7
    "max_scale_pct": 15.0,
    "field_distribution": "uniform",  # or "normal"
    # deformation overrides used by the deformed-training experiments
    "exp_deform_angle_deg": 12.5,
    "exp_deform_scale_pct": 12.5,
    # network / training
    "activation": "scaled_tanh",      # or "tanh"
    "output": "softmax",              # or "tanh_mse"
    "learning_rate": 1e-3,
    "lr_decay": 0.97,
    "weight_init_range": 0.05,
    "validate_every": 1,
    # experiment epoch budgets
    "epochs_desk_plain": 30,
    "epochs_desk_deformed": 80,
    "epochs_full_plain": 100,
    "epochs_full_deformed": 400,
}


def worker_count(requested: int | None = None) -> int:
    """Effective worker count: min(requested, COMMITTEE_FORGE_THREADS, cpu count)."""
    n = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}")
    if requested is not None:
        n = min(n, max(1, requested))
    return n


def apply_numba_thread_cap() -> int:
    """Clamp numba's thread pool to the configured worker count."""
    import numba

    n = min(worker_count(), numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of integers.

    Built on numpy's SeedSequence so distinct part tuples give uncorrelated
    streams and results do not depend on process hash randomization.
    """
    state = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2)
    return int(state[0]) | (int(state[1]) << 32)


def rng_for(*parts: int) -> np.random.Generator:
    """Independent generator for a tuple of stream-identifying integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [int(p) & 0xFFFFFFFF for p in parts])))


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Build the effective config: DEFAULTS, then file entries, then overrides.

    The file format is flat ``key = value`` lines; blank lines and lines
    starting with '#' are ignored.  Unknown keys are rejected so typos fail
    loudly.
    """
    cfg = dict(DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _coerce(key, raw)
    if overrides:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return cfg
