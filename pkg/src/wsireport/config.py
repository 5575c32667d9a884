"""Pipeline configuration: one JSON file with sections
``models``, ``sampler``, ``retrieval``, ``loop``, ``checklist``, ``trace``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import sampling
from .clients import ModelEndpoint, ModelRole
from .errors import ConfigError

DEFAULT_MAX_ROUNDS = 3  # loop budget T
DEFAULT_TOP_K = 3       # patches per query K


@dataclass
class SamplerConfig:
    k: int = sampling.DEFAULT_K
    per_cluster: int = sampling.DEFAULT_PER_CLUSTER
    seed: int | None = None  # falls back to the pipeline seed
    max_iters: int = sampling.DEFAULT_MAX_ITERS
    tol: float = sampling.DEFAULT_TOL


@dataclass
class RetrievalConfig:
    top_k: int = DEFAULT_TOP_K
    dedup: bool = True


@dataclass
class PipelineConfig:
    """Everything one slide run needs besides the slide itself."""

    models: dict[str, ModelEndpoint] = field(default_factory=dict)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    max_rounds: int = DEFAULT_MAX_ROUNDS
    checklist_path: str | None = None
    seed: int = 0
    trace_path: str | None = None
    describe_batch_size: int = 8

    def __post_init__(self):
        if self.max_rounds < 0:
            raise ConfigError(f"loop.max_rounds must be >= 0, got {self.max_rounds}")
        if self.retrieval.top_k < 1:
            raise ConfigError(f"retrieval.top_k must be >= 1, got {self.retrieval.top_k}")
        for role in ModelRole:
            self.models.setdefault(role.value, ModelEndpoint(role=role, mock=True))

    def endpoint(self, role: ModelRole | str) -> ModelEndpoint:
        return self.models[ModelRole(role).value]

    @property
    def sampler_seed(self) -> int:
        return self.seed if self.sampler.seed is None else self.sampler.seed


def config_from_dict(raw: dict, base_dir: Path | None = None) -> PipelineConfig:
    """Build a validated PipelineConfig from parsed JSON.

    Relative checklist/trace paths are resolved against ``base_dir`` (the
    config file's directory) when given.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    try:
        models = {}
        for role_name, spec in raw.get("models", {}).items():
            role = ModelRole(role_name)
            known = {"base_url", "model_name", "timeout", "max_retries", "mock", "api_key_env"}
            kwargs = {k: v for k, v in spec.items() if k in known}
            options = {k: v for k, v in spec.items() if k not in known}
            models[role.value] = ModelEndpoint(role=role, options=options, **kwargs)
        sampler = SamplerConfig(**raw.get("sampler", {}))
        retrieval = RetrievalConfig(**raw.get("retrieval", {}))
        loop = raw.get("loop", {})
        checklist_path = raw.get("checklist")
        trace_path = raw.get("trace", {}).get("path")
        cfg = PipelineConfig(
            models=models,
            sampler=sampler,
            retrieval=retrieval,
            max_rounds=loop.get("max_rounds", DEFAULT_MAX_ROUNDS),
            checklist_path=checklist_path,
            seed=raw.get("seed", 0),
            trace_path=trace_path,
            describe_batch_size=raw.get("describe_batch_size", 8),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if base_dir is not None:
        if cfg.checklist_path and not Path(cfg.checklist_path).is_absolute():
            cfg.checklist_path = str(base_dir / cfg.checklist_path)
        if cfg.trace_path and not Path(cfg.trace_path).is_absolute():
            cfg.trace_path = str(base_dir / cfg.trace_path)
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)
