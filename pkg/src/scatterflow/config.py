"""Experiment configuration: a JSON document validated against a strict schema.

Every section is optional and falls back to desk-scale defaults. Unknown keys
are rejected; errors carry the JSON pointer of the offending value.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .flow import FlowConfig
from .inversion import InversionConfig
from .physics import SensingConfig
from .training import DATASET_KINDS, DatasetSpec, TrainConfig

SEED_NAMES = ("dataset", "noise", "train", "inversion", "posterior")


class ConfigError(ValueError):
    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_PATH = {"type": "string", "minLength": 1}

SCHEMA = _obj({
    "sensing": _obj({
        "n": _INT1, "d_len": _POS, "freq": _POS, "n_inc": _INT1, "n_rec": _INT1, "radius": _POS,
        "snr_db": {"type": ["number", "null"]},
        "phantom": _obj({
            "source": {"enum": ["dataset", "cylinder", "file"]},
            "index": {"type": "integer", "minimum": 0},
            "eps_r": {"type": "number", "minimum": 1},
            "diameter": _POS,
            "center": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            "path": _PATH,
        }),
    }),
    "dataset": _obj({
        "kind": {"enum": list(DATASET_KINDS)},
        "count": _INT1,
        "path": _PATH,
    }),
    "flow": _obj({
        "preset": {"enum": ["desk", "paper", "tiny"]},
        "latent_shape": {"type": "array", "items": _INT1, "minItems": 3, "maxItems": 3},
        "interleave": {"type": "integer", "minimum": 0},
        "h_blocks": _INT1,
        "hidden": _INT1,
        "alpha": _POS,
        "chi_max": _POS,
    }),
    "train": _obj({
        "phase1_epochs": _INT1, "phase2_epochs": _INT1, "batch_size": _INT1,
        "lr_phase1": _POS, "lr_phase2": _POS,
        "dataset_path": _PATH,
    }),
    "inversion": _obj({
        "method": {"enum": ["lso", "dso"]},
        "init": {"enum": ["mog", "bp"]},
        "lambda": {"type": ["number", "null"], "minimum": 0},
        "tv_weight": _NONNEG,
        "lr": _POS,
        "iters": _INT1,
        "early_stop": {"type": "boolean"},
        "model_path": _PATH,
        "measurement_path": _PATH,
    }),
    "posterior": _obj({
        "beta": _NONNEG, "k_samples": _INT1, "lr": _POS, "iters": _INT1, "count": _INT1,
        "map_path": _PATH,
    }),
    "eval": _obj({
        "estimate": _PATH, "estimate_entry": {"type": "string"},
        "reference": _PATH, "reference_entry": {"type": "string"},
    }),
    "output_dir": _PATH,
    "seeds": _obj({name: {"type": "integer", "minimum": 0} for name in SEED_NAMES}),
})

# keys whose values name files that must already exist
_INPUT_PATHS = (
    ("sensing", "phantom", "path"), ("dataset", "path"), ("train", "dataset_path"),
    ("inversion", "model_path"), ("inversion", "measurement_path"), ("posterior", "map_path"),
    ("eval", "estimate"), ("eval", "reference"),
)


def _pointer(parts):
    return "".join(f"/{p}" for p in parts)


def validate(doc: dict, base_dir: Path | None = None):
    """Raise ConfigError for the first schema violation (deepest path first) or missing input file."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc),
                    key=lambda e: (-len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _pointer(err.absolute_path))
    for keys in _INPUT_PATHS:
        node = doc
        for k in keys:
            node = node.get(k) if isinstance(node, dict) else None
        if node is None:
            continue
        path = Path(node)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"file not found: {node}", _pointer(keys))


def apply_seed_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or key not in SEED_NAMES:
            raise ConfigError(f"bad seed override {item!r}; use name=int with name in {SEED_NAMES}", "/seeds")
        try:
            seed = int(value)
        except ValueError:
            raise ConfigError(f"seed {key!r} must be an integer, got {value!r}", f"/seeds/{key}") from None
        if seed < 0:
            raise ConfigError(f"seed {key!r} must be >= 0", f"/seeds/{key}")
        doc.setdefault("seeds", {})[key] = seed
    return doc


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass
class Experiment:
    """Validated config plus the typed objects each command needs."""

    doc: dict
    base_dir: Path

    def section(self, name) -> dict:
        return self.doc.get(name, {})

    def seed(self, name) -> int:
        return int(self.section("seeds").get(name, 0))

    def path(self, section, key, default: Path) -> Path:
        value = self.section(section).get(key)
        if value is None:
            return default
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def output_dir(self) -> Path:
        p = Path(self.doc.get("output_dir", "scatterflow_out"))
        return p if p.is_absolute() else self.base_dir / p

    def sensing(self) -> SensingConfig:
        s = {k: v for k, v in self.section("sensing").items() if k != "phantom"}
        if s.get("snr_db", 0.0) is None:
            s["snr_db"] = float("inf")
        return _build(SensingConfig, s, "/sensing")

    def phantom(self) -> dict:
        return {"source": "dataset", "index": 0, "eps_r": 4.0, "diameter": 0.1, "center": [0.0, 0.0],
                **self.section("sensing").get("phantom", {})}

    def dataset(self) -> DatasetSpec:
        d = self.section("dataset")
        spec = {"kind": d.get("kind", "ellipses"), "count": d.get("count", 2000), "n": self.sensing().n,
                "chi_max": self.flow().chi_max, "seed": self.seed("dataset"), "path": d.get("path")}
        if spec["path"] is not None:
            spec["path"] = str(self.path("dataset", "path", Path()))
        return _build(DatasetSpec, spec, "/dataset")

    def flow(self) -> FlowConfig:
        f = dict(self.section("flow"))
        preset = f.pop("preset", "desk")
        if "latent_shape" in f:
            f["latent_shape"] = tuple(f["latent_shape"])
        f.setdefault("chi_max", 3.0)
        try:
            return FlowConfig.preset(preset, n=self.sensing().n, seed=self.seed("train"), **f)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "/flow") from exc

    def train(self) -> TrainConfig:
        t = {k: v for k, v in self.section("train").items() if k != "dataset_path"}
        return _build(TrainConfig, {**t, "seed": self.seed("train")}, "/train")

    def inversion(self) -> InversionConfig:
        i = {k: v for k, v in self.section("inversion").items() if k not in ("model_path", "measurement_path")}
        if "lambda" in i:
            i["lam"] = i.pop("lambda")
        return _build(InversionConfig, {**i, "seed": self.seed("inversion")}, "/inversion")

    def posterior(self) -> dict:
        p = {"beta": 0.05, "k_samples": 25, "lr": 0.01, "iters": 200, "count": 25}
        p.update({k: v for k, v in self.section("posterior").items() if k != "map_path"})
        return p


def _build(cls, kwargs, pointer):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), pointer) from exc


def load(path, seed_overrides=()) -> Experiment:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = apply_seed_overrides(doc, seed_overrides)
    base = path.resolve().parent
    validate(doc, base)
    exp = Experiment(doc=doc, base_dir=base)
    # surface invariant violations (e.g. lso with bp init) before any work starts
    exp.sensing(), exp.dataset(), exp.flow(), exp.train(), exp.inversion()
    return exp
