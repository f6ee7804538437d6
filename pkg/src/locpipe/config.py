"""Flat `section.key = value` configuration files.

Values stay strings until read through a typed accessor. Every tunable
default of the toolkit lives in DEFAULTS so a config file (or CLI flag)
only needs to override what it changes. Relative paths in a config are
resolved against the config file's directory.
"""

import os

from .errors import ConfigError

__all__ = ["Config", "DEFAULTS", "load_config"]

DEFAULTS = {
    "mask.bottom_band": "0",
    "matching.ratio": "0.85",
    "pyramid.threshold": "100",
    "pyramid.mode": "MAX",
    "retrieval.m": "50",
    "retrieval.n": "10",
    "refine.sigma_mult": "3.0",
    "refine.min_track": "2",
    "pnp.threshold_px": "8.0",
    "pnp.confidence": "0.999",
    "pnp.max_iters": "1000",
    "pnp.min_inliers": "12",
    "cluster.method": "pose",
    "cluster.pose_radius": "2.0",
    "cluster.covis_threshold": "10",
    "localize.rerank": "inliers",   # inliers | perceptual
    "icp.enabled": "false",
    "icp.trim": "0.2",
    "icp.max_iters": "100",
    "icp.stride": "4",
    "depth.scale": "0.001",
    "pipeline.workers": "1",
    "eval.scale_ref": "10.0",
    "seed": "0",
}


class Config:
    def __init__(self, values=None, base_dir="."):
        self.values = dict(DEFAULTS)
        if values:
            self.values.update({str(k): str(v) for k, v in values.items()})
        self.base_dir = base_dir

    def set(self, key, value):
        self.values[str(key)] = str(value)

    def has(self, key):
        return key in self.values

    def get(self, key, default=None):
        if key in self.values:
            return self.values[key]
        if default is not None:
            return default
        raise ConfigError(f"missing config key {key!r}")

    def get_int(self, key, default=None):
        raw = self.get(key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}={raw!r} is not an integer") from None

    def get_float(self, key, default=None):
        raw = self.get(key, None if default is None else str(default))
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}={raw!r} is not a number") from None

    def get_bool(self, key, default=None):
        raw = self.get(key, None if default is None else str(default)).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}={raw!r} is not a boolean")

    def get_path(self, key, default=None):
        raw = self.get(key, default)
        return os.path.normpath(os.path.join(self.base_dir, raw))

    def get_paths(self, key, default=None):
        raw = self.get(key, default)
        return [os.path.normpath(os.path.join(self.base_dir, part.strip()))
                for part in raw.split(",") if part.strip()]


def load_config(path) -> Config:
    values = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return Config(values, base_dir=os.path.dirname(os.path.abspath(path)))
