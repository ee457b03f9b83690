"""Scenario configuration, validation and the bundled presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

import yaml

from ..errors import ConfigError
from ..host_model import StorageModel

Mode = Literal["pagefault", "reap"]
MODES: tuple[Mode, ...] = ("pagefault", "reap")

# Shared runtime binary, amortized over co-located instances like PSS does.
RUNTIME_OVERHEAD_PAGES = 10240
PSS_INSTANCES = 10


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    init_pages: int = 1000
    freed_after_init_pages: int = 0
    file_backed_pages: int = 0
    working_set_fraction: float = 0.5
    request_compute_cost: float = 0.001
    mode: Mode = "pagefault"
    repetitions: int = 3
    seed: int = 0
    cold_start_runtime_cost: float = 0.1
    random_read_bps: Optional[float] = None
    sequential_read_bps: Optional[float] = None
    guest_host_switch_cost: Optional[float] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("init_pages", "freed_after_init_pages", "file_backed_pages", "repetitions", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.init_pages < 1:
            raise ConfigError("init_pages must be >= 1")
        if not 0 <= self.freed_after_init_pages <= self.init_pages:
            raise ConfigError("freed_after_init_pages must lie in [0, init_pages]")
        if self.file_backed_pages < 0:
            raise ConfigError("file_backed_pages must be >= 0")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not isinstance(self.working_set_fraction, (int, float)) or not 0 < self.working_set_fraction <= 1:
            raise ConfigError("working_set_fraction must lie in (0, 1]")
        for name in ("request_compute_cost", "cold_start_runtime_cost"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(f"{name} must be a non-negative number")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.storage()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def surviving_pages(self) -> int:
        return self.init_pages - self.freed_after_init_pages

    def storage(self) -> StorageModel:
        overrides = {
            f: getattr(self, f)
            for f in ("random_read_bps", "sequential_read_bps", "guest_host_switch_cost")
            if getattr(self, f) is not None
        }
        return StorageModel(**overrides)

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a flat key-value mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigError(f"config must be flat; nested values for {', '.join(nested)}")
        return cls(**data)


PRESETS: dict[str, ScenarioConfig] = {
    # ~16 MB warm footprint, 40% of swapped memory touched per request
    "hello-world-small": ScenarioConfig(
        name="hello-world-small",
        init_pages=2600,
        freed_after_init_pages=400,
        file_backed_pages=400,
        working_set_fraction=0.4,
        request_compute_cost=0.001,
        seed=1,
    ),
    # image transform, large resident set that is mostly reused (1/8 scale)
    "image-processing-like": ScenarioConfig(
        name="image-processing-like",
        init_pages=7600,
        freed_after_init_pages=900,
        file_backed_pages=1000,
        working_set_fraction=0.9,
        request_compute_cost=0.3,
        seed=2,
    ),
    # video grayscale, large init-only footprint and a small working set (1/8 scale)
    "video-processing-like": ScenarioConfig(
        name="video-processing-like",
        init_pages=6000,
        freed_after_init_pages=500,
        file_backed_pages=800,
        working_set_fraction=0.33,
        request_compute_cost=1.2,
        seed=3,
    ),
}


def load_config(source: str) -> ScenarioConfig:
    """Load a config from a YAML/JSON file, or by preset name."""
    path = Path(source)
    if not path.exists():
        if source in PRESETS:
            return PRESETS[source]
        raise ConfigError(f"no config file or preset named {source!r}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    try:
        return ScenarioConfig.from_mapping(data or {})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
