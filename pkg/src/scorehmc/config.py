"""Run configuration: flat dotted keys in a line-based ``key = value`` format.

Example::

    # toy MRI run
    phantom.size = 32
    hmc.gamma = 0.995
    train.dataset = data/train.tnsr

Unknown keys are rejected with a nearest-key suggestion; values are typed
against the registry below. Relative paths resolve against the config file's
directory (or the working directory for command-line overrides), so a fully
resolved copy of the config reproduces the run from anywhere.
"""

from __future__ import annotations

import difflib
import os
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "PATH_KEYS"]


class ConfigError(ValueError):
    """Invalid key, value, or combination in a run configuration."""


# key -> (default, type); bools parse from true/false
DEFAULTS: dict = {
    "run.workers": (1, int),
    # phantom dataset generation
    "phantom.size": (32, int),
    "phantom.count_train": (200, int),
    "phantom.count_test": (20, int),
    "phantom.min_ellipses": (3, int),
    "phantom.max_ellipses": (7, int),
    "phantom.min_intensity": (0.2, float),
    "phantom.max_intensity": (0.6, float),
    "phantom.seed": (0, int),
    # simulated measurements written by make-data
    "measure.enabled": (False, bool),
    "measure.sigma_n": (0.1, float),
    "measure.seed": (1, int),
    "mask.acceleration": (4, int),
    "mask.center_fraction": (0.08, float),
    "mask.seed": (2, int),
    # score network architecture
    "network.kind": ("auto", str),
    "network.width": (128, int),
    "network.hidden_layers": (4, int),
    "network.features": (24, int),
    "network.conv_layers": (3, int),
    "network.spectral_target": (2.0, float),
    # training
    "train.dataset": ("", str),
    "train.as_complex": (True, bool),
    "train.steps": (2000, int),
    "train.learning_rate": (1e-4, float),
    "train.batch_size": (128, int),
    "train.noise_scale": (1.0, float),
    "train.sigma_floor": (1e-3, float),
    "train.beta1": (0.9, float),
    "train.beta2": (0.999, float),
    "train.adam_epsilon": (1e-8, float),
    "train.seed": (0, int),
    "train.resume": ("", str),
    # prior for sampling
    "prior.kind": ("checkpoint", str),
    "prior.checkpoint": ("", str),
    "prior.mean": (0.0, float),
    "prior.tau2": (1.0, float),
    "prior.dim": (2, int),
    "prior.weights": ("", str),
    "prior.means": ("", str),
    "prior.variances": ("", str),
    "prior.arc_components": (16, int),
    "prior.arc_radius": (1.0, float),
    "prior.arc_noise": (0.1, float),
    # measurement inputs for posterior sampling
    "sample.measurement": ("", str),
    "sample.mask": ("", str),
    "sample.measurement_index": (0, int),
    "sample.sigma_n": (0.1, float),
    # annealed HMC
    "hmc.sigma_init": (1.0, float),
    "hmc.sigma_final": (0.05, float),
    "hmc.gamma": (0.995, float),
    "hmc.epsilon": (0.0, float),  # 0 = one tenth of sigma_init
    "hmc.exponent": (1.5, float),
    "hmc.steps_per_temperature": (3, int),
    "hmc.leapfrog_steps": (5, int),
    "hmc.quad_points": (5, int),
    "hmc.mh_correction": (True, bool),
    "hmc.n_chains": (8, int),
    "hmc.final_steps": (0, int),
    "hmc.final_alpha": (0.0, float),  # 0 = keep the schedule's final step size
    "hmc.eds": (True, bool),
    "hmc.seed": (3, int),
    # evaluation
    "eval.samples": ("", str),
    "eval.diagnostics": ("", str),
    "eval.ground_truth": ("", str),
    "eval.ground_truth_index": (0, int),
    "eval.measurement": ("", str),
    "eval.mask": ("", str),
    "eval.measurement_index": (0, int),
    # previews
    "preview.count": (4, int),
}

PATH_KEYS = {
    "train.dataset", "train.resume", "prior.checkpoint",
    "sample.measurement", "sample.mask",
    "eval.samples", "eval.diagnostics", "eval.ground_truth",
    "eval.measurement", "eval.mask",
}

_SEED_KEYS = ("phantom.seed", "measure.seed", "mask.seed", "train.seed", "hmc.seed")


def _parse_value(key: str, raw: str):
    typ = DEFAULTS[key][1]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _reject_unknown(key: str) -> None:
    if key in DEFAULTS:
        return
    close = difflib.get_close_matches(key, DEFAULTS.keys(), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    raise ConfigError(f"unknown config key {key!r}{hint}")


class RunConfig:
    """Typed flat key set with defaults, file/override layering, and dumps."""

    def __init__(self, values: dict | None = None):
        self._values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            _reject_unknown(k)
            self._values[k] = v

    def __getitem__(self, key: str):
        _reject_unknown(key)
        return self._values[key]

    def set(self, key: str, raw: str, base_dir: str | None = None) -> None:
        _reject_unknown(key)
        value = _parse_value(key, raw)
        if key in PATH_KEYS and value:
            base = Path(base_dir) if base_dir else Path.cwd()
            value = str((base / value).resolve()) if not os.path.isabs(value) else value
        self._values[key] = value

    def apply_seed(self, seed: int) -> None:
        """Derive every namespace seed from one master seed."""
        for offset, key in enumerate(_SEED_KEYS):
            self._values[key] = seed + offset

    def dump(self) -> str:
        lines = [f"{k} = {_format_value(self._values[k])}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        cfg = cls()
        cfg.update_from_text(path.read_text(), base_dir=str(path.resolve().parent))
        return cfg

    def update_from_text(self, text: str, base_dir: str | None = None) -> None:
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, raw = stripped.split("=", 1)
            self.set(key.strip(), raw, base_dir=base_dir)

    def update_from_overrides(self, pairs) -> None:
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            key, raw = pair.split("=", 1)
            self.set(key.strip(), raw)

    def write_resolved(self, out_dir) -> Path:
        out = Path(out_dir) / "resolved.cfg"
        out.write_text(self.dump())
        return out
