"""Flat key=value experiment configuration with defaults and strict parsing.

Keys are section-prefixed (``attack.zeta=0.04``). Every key has a typed,
documented default; unknown keys or malformed values are rejected with the
offending line number. CLI flags mirror keys (``--attack.zeta 0.04``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s: str) -> tuple:
    s = s.strip()
    return tuple(float(tok) for tok in s.split(",") if tok.strip()) if s else ()


def _parse_str_list(s: str) -> tuple:
    s = s.strip()
    return tuple(tok.strip() for tok in s.split(",") if tok.strip()) if s else ()


def _parse_int_list(s: str) -> tuple:
    s = s.strip()
    return tuple(int(tok) for tok in s.split(",") if tok.strip()) if s else ()


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "floats": _parse_float_list,
    "strs": _parse_str_list,
    "ints": _parse_int_list,
}


@dataclass(frozen=True)
class Field:
    kind: str
    default: Any
    help: str


# One entry per configurable key. "-1" on seeds means "derive from run.seed";
# 0 on caps/periods means "disabled".
SCHEMA: dict[str, Field] = {
    "run.seed": Field("int", 0, "root seed; all other seeds derive from it"),
    "run.out": Field("str", "runs/out", "output directory for artifacts"),
    "run.threads": Field("int", 1, "evaluation worker threads"),
    "dataset.kind": Field("str", "synthetic", "synthetic | cifar10-binary"),
    "dataset.path": Field("str", "", "file or directory (cifar10-binary); empty uses UAPFORGE_DATA_DIR"),
    "dataset.classes": Field("int", 3, "synthetic: number of classes"),
    "dataset.size": Field("int", 8, "synthetic: image height/width"),
    "dataset.channels": Field("int", 3, "synthetic: channels"),
    "dataset.n": Field("int", 300, "synthetic: total images generated"),
    "dataset.background": Field("float", 90.0, "synthetic: shared smooth-structure amplitude"),
    "dataset.contrast": Field("float", 60.0, "synthetic: per-class structure amplitude"),
    "dataset.noise": Field("float", 12.0, "synthetic: per-sample pixel noise sigma"),
    "dataset.jitter": Field("int", 1, "synthetic: max translation in pixels"),
    "dataset.grid": Field("int", 4, "synthetic: coarse grid cells for smooth fields"),
    "dataset.seed": Field("int", -1, "synthetic generator seed (-1 = derive)"),
    "dataset.train_per_class": Field("int", 80, "balanced split: train images per class"),
    "dataset.val_per_class": Field("int", 20, "balanced split: validation images per class"),
    "target.arch": Field("str", "cnn-demo", "classifier architecture id"),
    "target.epochs": Field("int", 5, "classifier training epochs"),
    "target.batch_size": Field("int", 64, "classifier batch size"),
    "target.lr": Field("float", 1e-3, "classifier Adam learning rate"),
    "target.beta1": Field("float", 0.9, "classifier Adam beta1"),
    "target.beta2": Field("float", 0.999, "classifier Adam beta2"),
    "target.seed": Field("int", -1, "classifier init/shuffle seed (-1 = derive)"),
    "attack.p": Field("str", "inf", "perturbation norm: 2 | inf"),
    "attack.zeta": Field("float", 0.04, "relative perturbation budget"),
    "attack.kappa": Field("float", 0.0, "confidence margin in the clamped loss"),
    "attack.alpha": Field("float", 4.0, "distance-term weight"),
    "attack.mode": Field("str", "non-targeted", "non-targeted | targeted"),
    "attack.target_class": Field("int", 0, "class index for targeted mode"),
    "attack.lr": Field("float", 2e-4, "generator Adam learning rate"),
    "attack.beta1": Field("float", 0.5, "generator Adam beta1"),
    "attack.beta2": Field("float", 0.999, "generator Adam beta2"),
    "attack.batch_size": Field("int", 128, "attack training batch size"),
    "attack.epochs": Field("int", 500, "attack training epochs"),
    "attack.max_steps": Field("int", 0, "hard cap on optimizer steps (0 = no cap)"),
    "attack.scale_start": Field("float", 0.1, "initial scale fraction s of the budget"),
    "attack.plateau_window": Field("int", 3, "epochs of <tol improvement before growing s"),
    "attack.plateau_tol": Field("float", 0.01, "relative loss improvement counted as progress"),
    "attack.scale_growth": Field("float", 1.5, "multiplier applied to s on plateau"),
    "attack.seed": Field("int", -1, "attack seed (-1 = derive)"),
    "attack.fixed_z_seed": Field("int", -1, "pin the latent to this seed (-1 = fresh z per batch)"),
    "attack.checkpoint_every": Field("int", 0, "snapshot generator every N steps (0 = off)"),
    "attack.history_eval_cap": Field("int", 256, "images sampled for per-epoch history error rates"),
    "attack.targets": Field("strs", (), "target checkpoint paths (one = single, many = ensemble)"),
    "baseline.method": Field("str", "iterative-uap", "iterative-uap | fast-feature-fool"),
    "baseline.p": Field("str", "inf", "norm for iterative-uap: 2 | inf (fast-feature-fool: inf only)"),
    "baseline.max_passes": Field("int", 10, "iterative-uap: max outer passes"),
    "baseline.target_error": Field("float", 0.8, "iterative-uap: train error rate that stops the loop"),
    "baseline.inner_steps": Field("int", 50, "iterative-uap: per-input solver step cap"),
    "baseline.inner_step_size": Field("float", 0.0, "iterative-uap: per-step size (0 = epsilon/10)"),
    "baseline.max_images_per_pass": Field("int", 0, "iterative-uap: images visited per pass (0 = all)"),
    "baseline.fff_steps": Field("int", 400, "fast-feature-fool: optimization steps"),
    "baseline.fff_lr": Field("float", 0.02, "fast-feature-fool: Adam learning rate"),
    "baseline.seed": Field("int", -1, "baseline seed (-1 = derive)"),
    "defense.rounds": Field("int", 5, "attack/retrain rounds of the game"),
    "defense.mix_alpha": Field("float", 0.5, "clean-loss weight in the mixed objective"),
    "defense.retrain_epochs": Field("int", 5, "fine-tuning epochs per round"),
    "defense.seed": Field("int", -1, "defense seed (-1 = derive)"),
    "eval.batch_size": Field("int", 256, "evaluation batch size"),
    "eval.z_seed": Field("int", -1, "latent seed for evaluation draws (-1 = derive)"),
    "eval.repeats": Field("int", 1, "evaluation latent draws to average over"),
    "sweep.fractions": Field("floats", (0.001, 0.01, 0.2, 1.0), "training-set fractions"),
    "sweep.zetas": Field("floats", (0.01, 0.02, 0.04, 0.06, 0.08, 0.10), "budget grid for targeted sweeps"),
    "sweep.classes": Field("ints", (), "target classes for the targeted sweep"),
}


class Config:
    """Validated key -> value mapping over SCHEMA."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {k: f.default for k, f in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set_parsed(k, v)

    def get(self, key: str):
        return self.values[key]

    def set_parsed(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def set_raw(self, key: str, raw: str, line: Optional[int] = None) -> None:
        field = SCHEMA.get(key)
        if field is None:
            raise ConfigError(f"unknown config key {key!r}", line)
        try:
            self.values[key] = _PARSERS[field.kind](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}", line) from None

    def canonical_json(self) -> str:
        def enc(v):
            return list(v) if isinstance(v, tuple) else v

        return json.dumps({k: enc(v) for k, v in sorted(self.values.items())}, sort_keys=True)


def parse_config_file(path: str, into: Optional[Config] = None) -> Config:
    cfg = into or Config()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {line!r}", lineno)
            key, value = line.split("=", 1)
            cfg.set_raw(key.strip(), value.strip(), lineno)
    return cfg


def apply_overrides(cfg: Config, tokens: list[str]) -> Config:
    """Consume ``--section.key value`` pairs produced by the CLI."""
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r} (overrides look like --attack.zeta 0.04)")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok!r} is missing a value")
            raw = tokens[i + 1]
            i += 2
        cfg.set_raw(key, raw)
    return cfg
