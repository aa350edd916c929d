"""Plain-text ``key = value`` run configurations.

Blank lines and lines starting with ``#`` are ignored. Every key must belong to
the schema, appear at most once, and parse as the schema's type; required keys
must be present.
"""
from dataclasses import fields

from .diffusion import DiffusionConfig
from .synth import WormSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _schema(cls, required):
    out = {}
    for f in fields(cls):
        default = f.default
        kind = float if default is None else type(default)
        out[f.name] = (kind, f.name in required)
    return out


TRAIN_SCHEMA = _schema(TrainConfig, {"steps", "lr", "seed", "route", "K", "d"})
REFINE_SCHEMA = _schema(TrainConfig, {"steps", "lr", "seed"})
DIFFUSION_SCHEMA = _schema(DiffusionConfig, {"steps", "lr", "seed"})
WORM_SCHEMA = {
    "segments": (int, False),
    "ring": (int, False),
    "length": (float, False),
    "radius": (float, False),
    "scale": (tuple, False),
    "name": (str, False),
}


def _convert(key, text, kind):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot read {text!r} as {kind.__name__}") from None
    return text


def parse_text(text, schema, source="<config>"):
    """Parse ``text`` against ``schema`` (key -> (type, required)); returns a dict."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in schema:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value, schema[key][0])
    missing = sorted(k for k, (_, req) in schema.items() if req and k not in values)
    if missing:
        raise ConfigError(f"{source}: missing required key{'s' if len(missing) > 1 else ''} {', '.join(missing)}")
    return values


def parse_file(path, schema):
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), schema, str(path))


def train_config(path, schema=TRAIN_SCHEMA):
    return TrainConfig(**parse_file(path, schema))


def diffusion_config(path):
    return DiffusionConfig(**parse_file(path, DIFFUSION_SCHEMA))


def worm_spec(path):
    return WormSpec(**parse_file(path, WORM_SCHEMA))
