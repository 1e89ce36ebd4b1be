"""Experiment configuration: YAML parsing, validation, presets and fingerprint."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import domain_map
from .errors import ConfigError, ParameterError
from .pipeline import stable_hash
from .sparse_grid import VARIANTS

# keys that change where or how fast results are produced, not what they are
_NON_RESULT_KEYS = ("out", "jobs", "cache_dir")


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: dict(domain_map.SQUARE_DEFAULTS))
    mesh: int = 129
    qoi: str = "bump_lower_half"
    normalize: bool = True
    rule: str = "SM"
    w: int = 2
    n_s: int = 6
    sg_n_s_list: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    sg_w_max: dict = field(default_factory=lambda: {2: 6, 3: 5, 4: 4, 5: 4, 6: 3})
    trunc_n_s_list: list = field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    trunc_w: int = 3
    ref_n_s: int = 15
    ref_w: int = 3
    fem_meshes: list = field(default_factory=lambda: [17, 33, 65])
    fem_reference_mesh: int = 129
    fem_n_s: int = 2
    fem_w: int = 2
    out: str = "results"
    jobs: int = 1
    cache_dir: str | None = None
    force_unsafe: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"invalid value for '{key}': {msg}")

        try:
            domain_map.model_from_dict(self.model)
        except (ParameterError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for 'model': {exc}") from exc
        need(isinstance(self.mesh, int) and self.mesh >= 3, "mesh", "integer >= 3 required")
        need(self.qoi == "bump_lower_half", "qoi", "only 'bump_lower_half' is available")
        need(self.rule in VARIANTS, "rule", f"one of {VARIANTS}")
        for key in ("w", "trunc_w", "ref_w", "fem_w"):
            v = getattr(self, key)
            need(isinstance(v, int) and v >= 0, key, "non-negative integer required")
        for key in ("n_s", "ref_n_s", "fem_n_s"):
            v = getattr(self, key)
            need(isinstance(v, int) and v >= 1, key, "positive integer required")
        for key in ("sg_n_s_list", "trunc_n_s_list"):
            v = getattr(self, key)
            need(isinstance(v, list) and all(isinstance(k, int) and k >= 1 for k in v), key, "list of positive integers")
        need(isinstance(self.sg_w_max, dict), "sg_w_max", "mapping N_s -> maximum level required")
        self.sg_w_max = {int(k): int(v) for k, v in self.sg_w_max.items()}
        missing = [k for k in self.sg_n_s_list if k not in self.sg_w_max]
        need(not missing, "sg_w_max", f"no maximum level for N_s = {missing}")
        need(
            isinstance(self.fem_meshes, list) and all(isinstance(n, int) and n >= 3 for n in self.fem_meshes),
            "fem_meshes",
            "list of integers >= 3 required",
        )
        need(isinstance(self.fem_reference_mesh, int) and self.fem_reference_mesh >= 3, "fem_reference_mesh", ">= 3")
        need(isinstance(self.jobs, int) and self.jobs >= 1, "jobs", "positive integer required")

    def check_dimensions(self, keys) -> None:
        """Require the stochastic dimensions named in ``keys`` to fit the model."""
        n_total = self.build_model().n_total
        for key in keys:
            v = getattr(self, key)
            vals = v if isinstance(v, list) else [v]
            bad = [k for k in vals if k > n_total]
            if bad:
                raise ConfigError(f"invalid value for '{key}': {bad} exceeds the model's {n_total} parameters")

    def build_model(self) -> domain_map.DeformationModel:
        return domain_map.model_from_dict(self.model)

    def as_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["sg_w_max"] = {str(k): v for k, v in sorted(self.sg_w_max.items())}
        return d

    def fingerprint(self) -> str:
        d = self.as_dict()
        for k in _NON_RESULT_KEYS:
            d.pop(k, None)
        d["model"] = {**domain_map.SQUARE_DEFAULTS, **d["model"]}
        return stable_hash(d)


def desk_profile(**overrides) -> ExperimentConfig:
    """Laptop-scale preset: 129 x 129 mesh, reference on the level-3 grid in 15 dimensions."""
    return ExperimentConfig(**overrides)


PAPER_SCALE = {"mesh": 257, "fem_reference_mesh": 257, "fem_meshes": [17, 33, 65, 129]}


def paper_profile(cfg: ExperimentConfig | None = None, ref_w: int | None = None) -> ExperimentConfig:
    """Switch a config (default: the desk preset) to the 257 x 257 mesh profile."""
    cfg = desk_profile() if cfg is None else cfg
    changes = dict(PAPER_SCALE)
    if ref_w is not None:
        changes["ref_w"] = ref_w
    return dataclasses.replace(cfg, **changes)


def load_config(path, **overrides) -> ExperimentConfig:
    """Parse a YAML file; unknown keys and bad values raise :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"YAML syntax error in {path}{where}: {exc.problem}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; known keys: {sorted(known)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
