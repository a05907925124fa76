"""Run configuration: one JSON document covering model, features, training,
simulation, and scoring, with strict unknown-key rejection."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .encoders import ModelConfig
from .errors import ConfigError
from .features import FeatureConfig
from .simulate import SessionSpec
from .trainer import TrainConfig


@dataclass
class ScoringConfig:
    collar: float = 0.25
    threshold: float = 0.5
    median_window: int | None = 11

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if self.median_window is not None and self.median_window % 2 == 0:
            raise ConfigError("median window must be odd")


@dataclass
class SimulateConfig:
    n_sessions: int = 10
    session: SessionSpec = None

    def __post_init__(self):
        if self.session is None:
            self.session = SessionSpec()


@dataclass
class RunConfig:
    seed: int | None
    model: ModelConfig
    features: FeatureConfig
    train: TrainConfig
    simulate: SimulateConfig
    scoring: ScoringConfig


_SECTION_TYPES = {
    "model": ModelConfig,
    "features": FeatureConfig,
    "train": TrainConfig,
    "scoring": ScoringConfig,
}


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def resolve_config(document: dict) -> RunConfig:
    """Validate a raw JSON document and fill in every default."""
    if not isinstance(document, dict):
        raise ConfigError("config root must be a JSON object")
    known_top = {"seed", "model", "features", "train", "simulate", "scoring"}
    unknown = set(document) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = document.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        raw = document.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"'{name}' must be an object")
        sections[name] = _build_section(cls, raw, name)
    sim_raw = document.get("simulate", {})
    if not isinstance(sim_raw, dict):
        raise ConfigError("'simulate' must be an object")
    sim_raw = dict(sim_raw)
    n_sessions = sim_raw.pop("n_sessions", 10)
    session = _build_section(SessionSpec, sim_raw, "simulate")
    if seed is not None:
        session.seed = seed
    return RunConfig(
        seed=seed,
        model=sections["model"],
        features=sections["features"],
        train=sections["train"],
        simulate=SimulateConfig(n_sessions=n_sessions, session=session),
        scoring=sections["scoring"],
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            document = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return resolve_config(document)


def effective_document(cfg: RunConfig) -> dict:
    """The fully resolved config as a plain JSON-serializable document."""
    sim = asdict(cfg.simulate.session)
    sim["n_sessions"] = cfg.simulate.n_sessions
    return {
        "seed": cfg.seed,
        "model": asdict(cfg.model),
        "features": asdict(cfg.features),
        "train": asdict(cfg.train),
        "simulate": sim,
        "scoring": asdict(cfg.scoring),
    }


def write_effective_config(cfg: RunConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w") as f:
        json.dump(effective_document(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
