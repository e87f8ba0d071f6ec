"""Declarative run configuration loaded from one YAML document."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ._hashing import stable_hash
from .caption_engine import DecodingParams
from .exceptions import ConfigError
from .exemplar_store import STRATEGIES
from .prompt_builder import N_TEMPLATES, backend_styles, template_version
from .reasoner.passages import passage_template_hash
from .reasoner.visual import VISUAL_ENCODERS
from .region_selector import CLAMP_MODES

CACHE_ENV = "GEREA_CACHE_DIR"
PROFILES = ("default", "test")
CAPTION_METHODS = ("default", "question_relevant", "generic")
DEFAULT_K = {"instructblip": 20, "llava": 30}
DEFAULT_BUDGET = {"llava": 80, "instructblip": 40}


@dataclass
class DatasetConfig:
    name: str = "okvqa"
    root: str = "data"
    train_split: str = "train"
    eval_split: str = "val"
    dev_split: str | None = None
    answer_field: str = "raw"
    limit: int | None = None  # first N samples of each split, for smoke runs


@dataclass
class ITEConfig:
    kind: str = "synthetic"  # synthetic | blip
    checkpoint: str | None = None
    layer: int = 6
    clamp_mode: str = "positive"
    n_patches: int = 64
    n_heads: int = 2


@dataclass
class BackendConfig:
    backend_id: str = "mock-instructblip"
    kind: str = "mock"  # mock | instructblip | llava
    style: str = "instructblip"
    checkpoint: str | None = None
    K: int | None = None
    m: int = 20
    n_prompts: int = N_TEMPLATES
    budget: int | None = None
    decoding: dict = field(default_factory=dict)
    # mock only: fraction of records that contain the answer, zero-shot hit rate
    embed_fraction: float = 0.3
    zero_shot_accuracy: float = 0.5

    def resolved_K(self) -> int:
        return self.K if self.K is not None else DEFAULT_K.get(self.style, 20)

    def decoding_params(self, profile: str) -> DecodingParams:
        params = DecodingParams.for_style(self.style, **self.decoding)
        return params.deterministic() if profile == "test" else params


@dataclass
class ExemplarConfig:
    strategy: str = "fused"
    N: int | None = None


@dataclass
class VisualConfig:
    encoder: str = "detr"
    kind: str = "synthetic"  # synthetic | detr
    checkpoint: str | None = None


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    ite: ITEConfig = field(default_factory=ITEConfig)
    backends: list = field(default_factory=lambda: [BackendConfig()])
    caption_method: str = "default"
    exemplars: ExemplarConfig = field(default_factory=ExemplarConfig)
    visual: VisualConfig = field(default_factory=VisualConfig)
    reasoner: dict = field(default_factory=dict)  # FiDReader keyword arguments
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    seed: int = 0
    output_dir: str = "runs/default"
    profile: str = "default"
    workers: int = 1
    base_dir: str = field(default=".", repr=False)

    # -- derived values ----------------------------------------------------------

    @property
    def out(self) -> Path:
        return self._resolve(self.output_dir)

    @property
    def data_root(self) -> Path:
        return self._resolve(self.dataset.root)

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (Path(self.base_dir) / p).resolve()

    def exemplar_N(self) -> int:
        if self.exemplars.N is not None:
            return self.exemplars.N
        styles = [b.style for b in self.backends]
        return 10 if styles == ["instructblip"] else 5

    def budgets(self) -> dict:
        if len(self.backends) == 1:
            b = self.backends[0]
            return {b.backend_id: b.budget if b.budget is not None else self.caption_grid(b)[0] * self.caption_grid(b)[1]}
        return {b.backend_id: b.budget if b.budget is not None else DEFAULT_BUDGET.get(b.style, 40) for b in self.backends}

    def caption_grid(self, b: BackendConfig) -> tuple[int, int]:
        """(regions, prompts) per sample for backend ``b`` under the caption method."""
        if self.caption_method == "default":
            return b.m, b.n_prompts
        if self.caption_method == "question_relevant":
            return b.m, 1
        return 1, 1

    def reader_params(self) -> dict:
        params = dict(self.reasoner)
        params.setdefault("visual_encoder", self.visual.encoder)
        return params

    # -- validation --------------------------------------------------------------

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.caption_method not in CAPTION_METHODS:
            raise ConfigError(f"caption_method must be one of {CAPTION_METHODS}, got {self.caption_method!r}")
        if self.dataset.name not in ("okvqa", "aokvqa"):
            raise ConfigError(f"unknown dataset {self.dataset.name!r}")
        if self.ite.clamp_mode not in CLAMP_MODES:
            raise ConfigError(f"ite.clamp_mode must be one of {CLAMP_MODES}")
        if not self.backends:
            raise ConfigError("at least one caption backend is required")
        ids = [b.backend_id for b in self.backends]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"backend ids must be unique, got {ids}")
        for b in self.backends:
            if b.style not in backend_styles():
                raise ConfigError(f"backend {b.backend_id}: unknown style {b.style!r}")
            if not 1 <= b.n_prompts <= N_TEMPLATES:
                raise ConfigError(f"backend {b.backend_id}: n_prompts must be in 1..{N_TEMPLATES}")
            if b.m < 1 or b.resolved_K() < 1:
                raise ConfigError(f"backend {b.backend_id}: K and m must be >= 1")
            try:
                b.decoding_params(self.profile)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"backend {b.backend_id}: bad decoding params: {exc}") from exc
        if self.exemplars.strategy not in STRATEGIES:
            raise ConfigError(f"exemplars.strategy must be one of {STRATEGIES}")
        if self.visual.encoder not in VISUAL_ENCODERS:
            raise ConfigError(f"visual.encoder must be one of {VISUAL_ENCODERS}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be non-empty and distinct, got {self.seeds}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        from .reasoner.estimator import FiDReader

        unknown = set(self.reasoner) - set(FiDReader().get_params())
        if unknown:
            raise ConfigError(f"unknown reasoner options: {sorted(unknown)}")
        return self

    # -- hashing -------------------------------------------------------------------

    def _section(self, stage: str) -> dict:
        # Paths, worker counts and the output location never change results.
        ds = {k: v for k, v in asdict(self.dataset).items() if k != "root"}
        backends = [asdict(b) | {"K": b.resolved_K()} for b in self.backends]
        if stage == "regions":
            return {"dataset": ds, "ite": asdict(self.ite), "seed": self.seed, "caption_method": self.caption_method,
                    "grid": [(b.backend_id, b.resolved_K(), b.m) for b in self.backends]}
        if stage == "captions":
            return {"backends": backends, "profile": self.profile, "templates": template_version(),
                    "decoding": [b.decoding_params(self.profile).params_hash() for b in self.backends]}
        if stage == "exemplars":
            return {"exemplars": asdict(self.exemplars), "N": self.exemplar_N(), "budgets": self.budgets()}
        if stage == "train":
            return {"reader": self.reader_params(), "visual": asdict(self.visual), "seeds": list(self.seeds),
                    "passages": passage_template_hash()}
        return {}

    def stage_hashes(self) -> dict:
        """Cumulative hash per stage: each one covers its own section and every upstream one."""
        out, prev = {}, None
        for stage in STAGES:
            prev = stable_hash(stage, prev, self._section(stage))
            out[stage] = prev
        return out

    def config_hash(self) -> str:
        return self.stage_hashes()[STAGES[-1]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


STAGES = ("regions", "captions", "exemplars", "train", "predict", "ensemble", "evaluate", "analyze")


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict, base_dir=".") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = dict(data)
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    backends = data.pop("backends", None)
    cfg = RunConfig(
        dataset=_build(DatasetConfig, data.pop("dataset", None), "dataset"),
        ite=_build(ITEConfig, data.pop("ite", None), "ite"),
        backends=[_build(BackendConfig, b, f"backends[{i}]") for i, b in enumerate(backends)] if backends else [BackendConfig()],
        exemplars=_build(ExemplarConfig, data.pop("exemplars", None), "exemplars"),
        visual=_build(VisualConfig, data.pop("visual", None), "visual"),
        base_dir=str(base_dir),
        **data,
    )
    return cfg.validate()


def load_config(path, **overrides) -> RunConfig:
    """Read a YAML config; ``overrides`` replace scalar top-level fields (seed, workers, profile)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    cfg = config_from_dict(data, base_dir=path.resolve().parent)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides).validate() if overrides else cfg


def checkpoint_cache_dir() -> str | None:
    """Where pretrained checkpoints are cached (``$GEREA_CACHE_DIR``); None means the library default."""
    return os.environ.get(CACHE_ENV) or None
