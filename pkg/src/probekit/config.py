"""Run configuration: ``key = value`` lines, ``[section]`` headers, ``#`` comments.

Keys before the first section header are top-level (``seed``, ``run_id``).
Unknown sections or keys are errors, and every value is range-checked on
load, so a typo never silently falls back to a default.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from probekit.errors import ConfigError

_TOP = "__top__"


def _floats(raw: str) -> tuple:
    return tuple(float(v) for v in raw.split(",") if v.strip())


def _ints(raw: str) -> tuple:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _opt_float(raw: str):
    return None if raw.strip().lower() in ("", "auto", "none") else float(raw)


def _choice(*options):
    def parse(raw: str) -> str:
        raw = raw.strip()
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw

    return parse


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


def _range(v):
    return len(v) == 2 and v[0] <= v[1]


# section -> key -> (parser, default, check or None)
SCHEMA: dict[str, dict[str, tuple]] = {
    _TOP: {
        "seed": (int, 0, _nonneg),
        "run_id": (str, "", None),
    },
    "data": {
        "image_size": (int, 16, lambda v: v in (16, 32)),
        "n_classes": (int, 4, lambda v: 1 <= v <= 4),
        "n_train_per_class": (int, 500, _pos),
        "n_test_per_class": (int, 250, _pos),
        "n_fresh_per_class": (int, 500, _pos),
    },
    "generator": {
        "T": (int, 35, _pos),
        "beta_start": (float, 1e-4, lambda v: 0 < v < 1),
        "beta_end": (float, 0.25, lambda v: 0 < v < 1),
        "eta": (float, 0.0, _unit),
        "guidance": (float, 2.0, _nonneg),
        "width": (int, 128, _pos),
        "steps": (int, 3000, _pos),
        "lr": (float, 2e-3, _pos),
        "batch": (int, 128, _pos),
        "cond_drop": (float, 0.1, _unit),
        "data_var": (_opt_float, 0.01, lambda v: v is None or v > 0),
        "n_generators": (int, 1, _pos),
        "n_fake_train": (int, 2000, _pos),
        "n_fake_test": (int, 1000, _pos),
    },
    "generator_variant": {
        "beta_end": (float, 0.20, lambda v: 0 < v < 1),
        "width": (int, 160, _pos),
        "steps": (int, 3000, _pos),
        "lr": (float, 2e-3, _pos),
        "batch": (int, 128, _pos),
        "n_fake_test": (int, 1000, _pos),
    },
    "detector": {
        "channels": (_ints, (8, 16), lambda v: len(v) >= 1 and all(c > 0 for c in v)),
        "lr": (float, 3e-3, _pos),
        "weight_decay": (float, 1e-4, _nonneg),
        "batch": (int, 64, lambda v: v >= 2),
        "max_epochs": (int, 60, _pos),
        "patience": (int, 5, _pos),
        "val_fraction": (float, 0.1, lambda v: 0 < v < 1),
        "n_critics": (int, 1, _pos),
        "ft_lr": (float, 3e-4, _pos),
        "ft_max_epochs": (int, 10, _pos),
        "w": (float, 0.5, _unit),
    },
    "probe": {
        "lam": (float, 1.0, _nonneg),
        "lr": (float, 1e-3, _pos),
        "momentum": (float, 0.9, lambda v: 0 <= v < 1),
        "batch": (int, 16, _pos),
        "n_prompts": (int, 2000, _pos),
        "K": (int, 5, _pos),
        "t_s": (int, 5, _pos),
        "t_s_mode": (_choice("fixed", "random"), "fixed", None),
        "rounds": (int, 1, _pos),
        "rank": (int, 4, _pos),
        "alpha": (_opt_float, None, lambda v: v is None or v > 0),
        "step_convention": (_choice("printed", "k"), "printed", None),
        "grad_branches": (_choice("both", "cond"), "both", None),
        "sample_mode": (_choice("trajectory", "final"), "trajectory", None),
        "n_export": (int, 2000, _pos),
    },
    "augment": {
        "prob": (float, 0.2, _unit),
        "quality_range": (_floats, (50.0, 100.0), lambda v: _range(v) and 1 <= v[0] and v[1] <= 100),
        "blur_sigma_range": (_floats, (0.0, 3.0), lambda v: _range(v) and v[0] >= 0),
        "noise_std_range": (_floats, (0.0, 55.0), lambda v: _range(v) and v[0] >= 0),
        "resize_scale_range": (_floats, (0.5, 2.0), lambda v: _range(v) and v[0] > 0),
        "brightness_range": (_floats, (-0.1, 0.1), _range),
        "contrast_range": (_floats, (0.8, 1.2), lambda v: _range(v) and v[0] > 0),
        "flip": (_bool, True, None),
        "rotate": (_bool, True, None),
        "crop": (_bool, True, None),
    },
    "eval": {
        "blur_grid": (_floats, (0.0, 0.5, 1.0, 1.5, 2.0), lambda v: all(s >= 0 for s in v)),
        "jpeg_grid": (_ints, (95, 85, 75, 65), lambda v: all(1 <= q <= 100 for q in v)),
        "resize_grid": (_floats, (0.5, 0.75, 1.0, 1.25, 1.5), lambda v: all(s > 0 for s in v)),
        "t_probe": (int, 1, _pos),
        "pgd": (_bool, True, None),
        "pgd_eps": (float, 4 / 255, _nonneg),
        "pgd_alpha": (float, 1 / 255, _pos),
        "pgd_steps": (int, 10, _pos),
        "n_pgd": (int, 500, _pos),
        "n_spectrum": (int, 500, _pos),
    },
    "io": {
        "out_dir": (str, "runs", None),
        "precision": (_choice("f32", "f64"), "f32", None),
    },
}

# keys that never change results and are left out of the hash
_UNHASHED = {(_TOP, "run_id"), ("io", "out_dir")}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values[_TOP]["seed"]

    @property
    def run_id(self) -> str:
        return self.values[_TOP]["run_id"] or f"run-{self.hash()[:12]}"

    def hash(self) -> str:
        payload = {
            sec: {k: v for k, v in keys.items() if (sec, k) not in _UNHASHED}
            for sec, keys in self.values.items()
        }
        blob = json.dumps(payload, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def override(self, section: str = _TOP, **kv) -> "RunConfig":
        """Return a validated copy with ``kv`` replacing keys of ``section``."""
        out = copy.deepcopy(self.values)
        for k, v in kv.items():
            if k not in SCHEMA.get(section, {}):
                raise ConfigError(f"unknown key {section}.{k}")
            out[section][k] = v
        cfg = RunConfig(out)
        validate(cfg)
        return cfg

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.values[_TOP].items()]
        for sec in SCHEMA:
            if sec == _TOP:
                continue
            lines += ["", f"[{sec}]"] + [f"{k} = {_fmt(v)}" for k, v in self.values[sec].items()]
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        out = copy.deepcopy(self.values)
        out["top"] = out.pop(_TOP)
        return out


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v) if not isinstance(v, float) else repr(v)


def default_config() -> RunConfig:
    return RunConfig({sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()})


def validate(cfg: RunConfig) -> None:
    for sec, keys in SCHEMA.items():
        for k, (_, _, check) in keys.items():
            v = cfg.values[sec][k]
            if check is not None and not check(v):
                raise ConfigError(f"{sec}.{k} = {v!r} is out of range")
    gen, probe = cfg["generator"], cfg["probe"]
    if probe["K"] > gen["T"]:
        raise ConfigError(f"probe.K = {probe['K']} exceeds generator.T = {gen['T']}")
    if probe["t_s_mode"] == "fixed" and probe["t_s"] + (probe["K"] - 1) * max(1, gen["T"] // probe["K"]) > gen["T"]:
        raise ConfigError("probe.t_s leaves no room for K training steps")
    if cfg["eval"]["t_probe"] > gen["T"]:
        raise ConfigError("eval.t_probe exceeds generator.T")
    if cfg["eval"]["pgd_alpha"] > cfg["eval"]["pgd_eps"] > 0:
        raise ConfigError("eval.pgd_alpha must not exceed eval.pgd_eps")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None, default_section="__defaults_unused__",
    )
    parser.optionxform = str  # keys are case-sensitive (T, K)
    try:
        parser.read_string(f"[{_TOP}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = default_config()
    for sec in parser.sections():
        if sec not in SCHEMA or (sec == _TOP and sec in text):
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                where = "top level" if sec == _TOP else f"[{sec}]"
                raise ConfigError(f"unknown key {key!r} at {where}")
            try:
                cfg.values[sec][key] = SCHEMA[sec][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {exc}") from exc
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
