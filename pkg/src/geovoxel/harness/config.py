"""Run configuration: one JSON document, every seed named explicitly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..encoding import DEFAULT_LAMBDAS, NC_THRESHOLD, SplitConfig
from ..errors import InputError
from ..featmodel import ContrastiveConfig
from .scenes import SceneSpec


@dataclass
class ResponseConfig:
    n_subjects: int = 4
    n_voxels: int = 50
    repeats: int = 3
    noise_level: float = 0.5
    source_model: str = "truth"
    source_layer: str = "descriptors"
    unassigned_fraction: float = 0.0


@dataclass
class ExternalFeatures:
    model: str
    layer: str
    path: str


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "geovoxel-out"
    n_train_pairs: int = 20
    n_heldout_pairs: int = 5
    n_stimuli: int = 200
    grid_dims: tuple = (32, 32, 32)
    pool: int = 8
    scene: SceneSpec = field(default_factory=SceneSpec)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    responses: ResponseConfig = field(default_factory=ResponseConfig)
    models: tuple = ("grnn", "truth", "random")
    layers: tuple = ("conv1", "conv2")
    random_features: int = 64
    external_features: tuple = ()
    comparisons: tuple = ()
    nc_threshold: float = NC_THRESHOLD
    pca_components: int = 1000

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.models = tuple(self.models)
        self.layers = tuple(self.layers)
        self.comparisons = tuple(tuple(c) for c in self.comparisons)
        if self.pca_components < 1:
            raise InputError("pca_components must be >= 1")
        if any(d % self.pool for d in self.grid_dims):
            raise InputError("grid dims must be divisible by the pooling block")
        if self.n_train_pairs < 1 or self.n_stimuli < 2:
            raise InputError("need at least one training pair and two stimuli")
        if self.responses.n_subjects < 1:
            raise InputError("need at least one subject")
        known = {"grnn", "truth", "random"} | {e.model for e in self.external_features}
        unknown = [m for m in self.models if m not in known]
        if unknown:
            raise InputError(f"unknown model(s) {unknown}; external models need an "
                             f"external_features entry")
        for pair in self.comparisons:
            if len(pair) != 2 or any(m not in self.models for m in pair):
                raise InputError(f"comparison {pair} must name two configured models")

    def model_comparisons(self):
        if self.comparisons:
            return list(self.comparisons)
        ms = list(self.models)
        return [(a, b) for i, a in enumerate(ms) for b in ms[i + 1:]]

    def check_paths(self):
        """Raise if any referenced input file is missing or unreadable."""
        for ext in self.external_features:
            p = Path(ext.path)
            sidecar = p if p.suffix == ".json" else Path(str(p) + ".json")
            try:
                sidecar.read_bytes()
            except OSError as exc:
                raise InputError(f"cannot read external features {ext.path}: {exc}") from exc

    def to_dict(self):
        d = asdict(self)
        d["split"]["lambda_grid"] = list(self.split.lambda_grid)
        return d


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise InputError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise InputError(f"unknown key(s) in {where}: {sorted(extra)}")
    return cls(**data)


def config_from_dict(data):
    data = dict(data)
    nested = {
        "scene": SceneSpec,
        "contrastive": ContrastiveConfig,
        "split": SplitConfig,
        "responses": ResponseConfig,
    }
    for key, cls in nested.items():
        if key in data:
            sub = dict(data[key])
            if key == "scene":
                for k in ("radius_range", "box_size_range"):
                    if k in sub:
                        sub[k] = tuple(sub[k])
            data[key] = _build(cls, sub, key)
    if "external_features" in data:
        data["external_features"] = tuple(_build(ExternalFeatures, e, "external_features")
                                          for e in data["external_features"])
    return _build(RunConfig, data, "config")


def load_config(path=None, **overrides):
    """Read a JSON config (or defaults when ``path`` is None) and apply overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "seed" in overrides:
        # a global seed override reseeds every stage
        s = int(overrides["seed"])
        cfg = replace(cfg, contrastive=replace(cfg.contrastive, seed=s),
                      split=replace(cfg.split, seed=s))
    return replace(cfg, **overrides) if overrides else cfg


__all__ = ["RunConfig", "ResponseConfig", "ExternalFeatures", "load_config", "config_from_dict",
           "DEFAULT_LAMBDAS"]
