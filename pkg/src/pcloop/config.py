"""Line-oriented ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys are the field names of
``SamplingConfig``, ``LoopConfig`` and ``RansacConfig`` plus a handful of
run-level settings; ``n`` is accepted as an alias of ``fraction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from pcloop.descriptors import SamplingConfig
from pcloop.loopclosure import LoopConfig, PositionalPrior
from pcloop.registration import RansacConfig

_SAMPLING = {"fraction": float, "patch_radius": float, "normal_k": int, "min_patch_points": int}
_LOOP = {"tau_o": float, "tau_e": float, "tau_rho": float, "exclusion_window": int, "rank_by": str}
_RANSAC = {"max_iterations": int, "confirmation_iterations": int, "inlier_threshold": float, "sample_size": int}
_RUN = {
    "seed": int,
    "profile": str,
    "mode": str,
    "stride": int,
    "backend": str,
    "sigma": float,
    "sigma_multiplier": float,
    "sigma_file": str,
    "gt_distance": float,
}
_ALIASES = {"n": "fraction"}
KNOWN_KEYS = {**_SAMPLING, **_LOOP, **_RANSAC, **_RUN}


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in KNOWN_KEYS:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = KNOWN_KEYS[key](value)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def load_config(path) -> dict:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def read_sigma_series(path) -> np.ndarray:
    """One sigma (m) per line, indexed by keyframe id."""
    vals = [float(ln.split("#", 1)[0]) for ln in Path(path).read_text().splitlines() if ln.split("#", 1)[0].strip()]
    if not vals:
        raise ValueError(f"{path}: empty sigma series")
    return np.array(vals)


@dataclass
class Settings:
    seed: int = 0
    profile: str = "indoor"
    mode: str = "setting1"
    stride: int = 1
    backend: str = "fpfh"
    gt_distance: Optional[float] = None
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)


def build_settings(values: dict, seed: Optional[int] = None, profile: Optional[str] = None) -> Settings:
    """Assemble the typed configs; explicit ``seed``/``profile`` arguments override file values."""
    v = dict(values)
    if seed is not None:
        v["seed"] = seed
    if profile is not None:
        v["profile"] = profile
    s = Settings(**{k: v[k] for k in ("seed", "profile", "mode", "stride", "backend", "gt_distance") if k in v})
    s.sampling = SamplingConfig.for_profile(s.profile, seed=s.seed, **{k: v[k] for k in _SAMPLING if k in v})
    prior = None
    if "sigma_file" in v:
        prior = PositionalPrior(tuple(read_sigma_series(v["sigma_file"])), v.get("sigma_multiplier", 3.0))
    elif "sigma" in v:
        prior = PositionalPrior(v["sigma"], v.get("sigma_multiplier", 3.0))
    s.loop = LoopConfig(positional_prior=prior, **{k: v[k] for k in _LOOP if k in v})
    s.ransac = RansacConfig(seed=s.seed, **{k: v[k] for k in _RANSAC if k in v})
    if s.mode not in ("setting1", "setting2"):
        raise ValueError(f"mode must be setting1 or setting2, got {s.mode!r}")
    if s.stride < 1:
        raise ValueError("stride must be >= 1")
    return s
