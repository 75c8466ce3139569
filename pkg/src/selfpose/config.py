"""Plain-text ``key = value`` run configuration.

Keys are ``section.field`` names mirroring :class:`~selfpose.pipeline.RunConfig`
(``run.*`` for its top-level fields). Blank lines and ``#`` comments are
ignored, tuples are comma separated and unknown keys are errors. Example::

    # proposal and filtering
    filter.sigma_u = 20        # px
    filter.sigma_z = 0.1       # m
    gate.s_star = 0.5
    run.elevation = 55         # deg

``default_text()`` lists every key with its default.
"""
from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .geometry import Pose, axis_angle_to_quat, quat_to_axis_angle
from .pipeline import RunConfig

SECTIONS = ("filter", "refine", "gate", "noise", "segmenter", "camera", "workspace")
# fields that have no scalar/tuple text form; the calibration bias gets two derived keys instead
_SKIPPED = {("noise", "calib_bias"), ("segmenter", "miss"), ("run", "objects")}
_SKIPPED |= {("run", s) for s in SECTIONS}


class ConfigError(ValueError):
    """Raised for unreadable files, unknown keys and invalid values."""


def _flatten(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        if ("run", f.name) not in _SKIPPED:
            out[f"run.{f.name}"] = getattr(cfg, f.name)
    out["run.objects"] = tuple(cfg.objects)
    for sec in SECTIONS:
        sub = getattr(cfg, sec)
        for f in fields(sub):
            if (sec, f.name) not in _SKIPPED:
                out[f"{sec}.{f.name}"] = getattr(sub, f.name)
    bias = cfg.noise.calib_bias
    out["noise.calib_bias_t"] = tuple(float(x) for x in bias.translation)
    out["noise.calib_bias_r"] = tuple(float(x) for x in quat_to_axis_angle(bias.rotation))
    return out


def defaults() -> dict:
    """Every configurable key with its default value."""
    return _flatten(RunConfig())


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def default_text(cfg: RunConfig | None = None) -> str:
    """The configuration as a loadable ``key = value`` file."""
    flat = _flatten(RunConfig() if cfg is None else cfg)
    return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(flat.items()))


def _scalar(text, like, key):
    t = text.strip()
    try:
        if isinstance(like, bool):
            if t.lower() in ("true", "yes", "1", "on"):
                return True
            if t.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(t)
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
        return t
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None


def _parse(key, text, like):
    if like is None:    # optional tuple of floats (e.g. the observed light direction)
        if text.strip().lower() in ("none", ""):
            return None
        return tuple(_scalar(x, 0.0, key) for x in text.split(","))
    if isinstance(like, tuple):
        parts = [p for p in (x.strip() for x in text.split(",")) if p]
        if like and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in like):
            vals = tuple(_scalar(p, 0.0, key) for p in parts)
            if len(vals) != len(like):
                raise ConfigError(f"{key}: expected {len(like)} values, got {len(vals)}")
            return vals
        return tuple(parts)
    return _scalar(text, like, key)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines to ``base`` (default: :class:`RunConfig`)."""
    base = RunConfig() if base is None else base
    known = _flatten(base)
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _parse(key, val, known[key])
    return apply(base, values)


def apply(base: RunConfig, values: dict) -> RunConfig:
    """Return ``base`` with the flat ``{key: value}`` overrides applied and validated."""
    known = _flatten(base)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    try:
        sections = {}
        for sec in SECTIONS:
            kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(sec + ".")}
            if sec == "noise":
                t = kw.pop("calib_bias_t", None)
                r = kw.pop("calib_bias_r", None)
                if t is not None or r is not None:
                    old = base.noise.calib_bias
                    q = axis_angle_to_quat(np.asarray(r, dtype=float)) if r is not None else old.rotation
                    kw["calib_bias"] = Pose(q, np.asarray(t, dtype=float) if t is not None else old.translation)
            if kw:
                sections[sec] = replace(getattr(base, sec), **kw)
        top = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("run.")}
        return replace(base, **sections, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_text(text, base)


__all__ = ["ConfigError", "SECTIONS", "apply", "default_text", "defaults", "load_config", "parse_text"]
