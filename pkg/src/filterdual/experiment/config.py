"""Experiment configuration: a single JSON document per run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from ..errors import ConfigError
from ..markov_model import model_from_dict

POLICY_KINDS = ("zero", "lq", "deterministic", "regression", "optimal")

# default acceptance tolerances; a value of 0 is allowed so a run can be
# forced to fail, negative values are rejected
DEFAULT_TOLERANCES = {
    "c1_gap_sigmas": 3.0,
    "c1_halving_ratio": 0.6,
    "c2_rel_error": 0.05,
    "c3_slope_halfwidth": 0.3,
    "c4_sup_error": 0.05,
    "c4_slope_halfwidth": 0.3,
    "c5_trend": 3.0,
    "c5_rel_value": 0.05,
    "c6_scaled_error": 1e-3,
    "c6_riccati": 1e-8,
    "c7_order_sigmas": 2.0,
    "c7_value_sigmas": 3.0,
    "c8_rel_prior_std": 0.02,
    "c9_exact": 1e-12,
    "c9_fd": 1e-6,
}


def load_schema(name: str) -> dict:
    """JSON schema ``name`` shipped with the package."""
    text = resources.files("filterdual.experiment").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, name: str) -> None:
    """Validate ``doc`` against a shipped schema; raises :class:`ConfigError`."""
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{name}: {path}: {exc.message}") from None


@dataclass
class ExperimentConfig:
    """Everything a subcommand needs, as plain JSON-compatible values.

    Exactly one of ``model`` (inline model document) and ``model_file``
    (path to one, relative paths resolved against the config file) is set.
    """

    model: dict | None = None
    model_file: str | None = None
    grid: dict = field(default_factory=lambda: {"T": 1.0, "n_steps": 1000})
    bundle: dict = field(default_factory=lambda: {"N": 1000, "master_seed": 0})
    policy: dict = field(default_factory=lambda: {"kind": "zero"})
    f: list = field(default_factory=lambda: [1.0, 0.0])
    basis: dict = field(default_factory=lambda: {"degree": 1})
    output_dir: str = "out"
    tolerances: dict = field(default_factory=dict)
    filter: dict = field(default_factory=lambda: {"grid_n": 101, "scheme": "euler"})
    iterations: int = 3
    base_dir: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if (self.model is None) == (self.model_file is None):
            raise ConfigError("give exactly one of 'model' and 'model_file'")
        if self.model_file is not None and not self._model_path().exists():
            raise ConfigError(f"model file not found: {self._model_path()}")
        bad = sorted(k for k in self.tolerances if k not in DEFAULT_TOLERANCES)
        if bad:
            raise ConfigError(f"unknown tolerances: {', '.join(bad)}")
        neg = sorted(k for k, v in self.tolerances.items() if not v >= 0)
        if neg:
            raise ConfigError(f"tolerances must be nonnegative: {', '.join(neg)}")

    def _model_path(self) -> Path:
        p = Path(self.model_file)
        return p if p.is_absolute() or self.base_dir is None else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        return {k: v for k, v in doc.items() if v is not None}

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        validate(doc, "config")
        return cls(**doc, base_dir=None if base_dir is None else str(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def model_obj(self):
        """The model described by the config."""
        doc = self.model
        if doc is None:
            doc = json.loads(self._model_path().read_text())
        try:
            return model_from_dict(doc)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model document: {exc}") from None

    def tolerance(self, key: str) -> float:
        return float(self.tolerances.get(key, DEFAULT_TOLERANCES[key]))

    def all_tolerances(self) -> dict:
        return {k: self.tolerance(k) for k in DEFAULT_TOLERANCES}
