"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment. Unknown keys and ill-typed
values are rejected. ``auto`` selects the per-shot default for keys that
have one.
"""

from __future__ import annotations

import math

from fslab.encoder import ConfigError


class _Kind:
    def __init__(self, name, parse, fmt=str, allow_auto=False):
        self.name, self.parse, self.fmt, self.allow_auto = name, parse, fmt, allow_auto


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {text!r}")
    return v


def _list(parse):
    def inner(text):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(parse(p) for p in parts)

    return inner


def _fmt_list(values):
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


def _choice(*options):
    def inner(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return inner


INT = _Kind("int", int)
FLOAT = _Kind("float", _parse_float, repr)
BOOL = _Kind("bool", _parse_bool, lambda v: "true" if v else "false")
STR = _Kind("str", str)
INTS = _Kind("int list", _list(int), _fmt_list)
FLOATS = _Kind("float list", _list(_parse_float), _fmt_list)
AUTO_INT = _Kind("int or auto", int, str, allow_auto=True)
AUTO_FLOAT = _Kind("float or auto", _parse_float, repr, allow_auto=True)


def _choices(*options, many=False):
    parse = _list(_choice(*options)) if many else _choice(*options)
    return _Kind("|".join(options), parse, _fmt_list if many else str)


# key -> (kind, default)
SCHEMA = {
    # data
    "data.source": (_choices("synth", "manifest"), "synth"),
    "data.manifest": (STR, ""),
    "data.num_classes": (INT, 10),
    "data.per_class": (INT, 40),
    "data.seed": (INT, 0),
    "data.image_size": (INT, 32),
    "data.pool_per_class": (INT, 20),
    # encoder
    "encoder.patch_size": (INT, 4),
    "encoder.embed_dim": (INT, 64),
    "encoder.num_blocks": (INT, 8),
    "encoder.num_heads": (INT, 4),
    "encoder.output_dim": (INT, 64),
    "encoder.seed": (INT, 0),
    "encoder.checkpoint": (STR, ""),
    "encoder.pretrain_steps": (INT, 0),
    # run
    "seeds": (INTS, (0,)),
    "n_shot": (INT, 5),
    "strategy": (_choices("linear_probe", "lora_ce", "lora_hybrid"), "linear_probe"),
    "augment": (_choices("none", "low", "high", "auto", many=True), ("auto",)),
    "epochs": (AUTO_INT, "auto"),
    "batch_size": (AUTO_INT, "auto"),
    "sampler": (_choices("auto", "random", "stratified"), "auto"),
    "classes_per_batch": (AUTO_INT, "auto"),
    "instances_per_class": (AUTO_INT, "auto"),
    "label_smoothing": (AUTO_FLOAT, "auto"),
    "dropout": (AUTO_FLOAT, "auto"),
    "weight_decay": (AUTO_FLOAT, "auto"),
    "head_feature": (_choices("pooled", "embedding"), "pooled"),
    "projection_dim": (AUTO_INT, "auto"),
    "projection_hidden": (INT, 128),
    "supcon_include_self": (BOOL, False),
    "eval_every": (INT, 1),
    # schedules
    "lr_base": (AUTO_FLOAT, "auto"),
    "lr_final": (FLOAT, 1e-6),
    "warmup_fraction": (FLOAT, 0.1),
    "tau_start": (FLOAT, 0.2),
    "tau_end": (FLOAT, 0.07),
    "lambda_start": (FLOAT, 0.05),
    "lambda_end": (FLOAT, 0.3),
    "lambda_warmup_fraction": (FLOAT, 0.5),
    "lambda_shape": (_choices("ramp", "triangular"), "ramp"),
    # lora
    "lora.rank": (AUTO_INT, "auto"),
    "lora.alpha": (AUTO_FLOAT, "auto"),
    "lora.depth": (AUTO_INT, "auto"),
    "lora.dropout": (AUTO_FLOAT, "auto"),
    "lora.targets": (STR, "auto"),
    # prototype sweep
    "prototype.shots": (INTS, (1, 3, 5, 10, 20)),
    "prototype.alphas": (FLOATS, (0.0, 0.2, 0.5, 0.7)),
    "priors.mode": (_choices("none", "heldout-proxy", "file"), "none"),
    "priors.path": (STR, ""),
    # analysis
    "analyze.augment": (_choices("none", "low", "high"), "none"),
    "analyze.subsample_classes": (INT, 0),
    "analyze.seed": (INT, 0),
}


class ExperimentConfig:
    """Resolved settings; read with ``cfg["key"]``."""

    def __init__(self, values=None):
        self._values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind, _ = SCHEMA[key]
        if isinstance(value, str):
            value = _parse_value(key, kind, value)
        self._values[key] = value

    def __getitem__(self, key):
        return self._values[key]

    def get(self, key, auto=None):
        """Value of ``key``, with ``auto`` replaced by the given fallback."""
        v = self._values[key]
        return auto if v == "auto" else v

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._values == other._values

    def dumps(self):
        lines = ["# fslab experiment config (fully resolved)"]
        for key, (kind, _) in SCHEMA.items():
            v = self._values[key]
            lines.append(f"{key} = {'auto' if v == 'auto' else kind.fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text, source="<config>"):
        cfg = cls()
        seen = set()
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            if key in seen:
                raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
            seen.add(key)
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, str(path))


def _parse_value(key, kind, text):
    text = text.strip()
    if kind.allow_auto and text == "auto":
        return "auto"
    try:
        return kind.parse(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.name}, got {text!r} ({exc})") from None
