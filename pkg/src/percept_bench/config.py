from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .cascade import BoostConfig, ScanConfig
from .errors import ConfigError
from .evaluation import MetricConfig
from .features import ScaleSpaceConfig
from .matching import MatchConfig
from .segmentation import ProposalConfig
from .sift_recognizer import SIFT_PRESETS, HoughConfig, SiftPipelineConfig
from .synthetic import SceneSpec
from .vocab_tree import TREE_PRESETS, TreeConfig, VocabDetectorConfig

logger = logging.getLogger(__name__)

_DEFAULT_SEED = 0
_SEED_ENV = "PERCEPT_BENCH_SEED"


@dataclass(frozen=True)
class BenchConfig:
    """Where frames and models come from and where reports go."""

    method: str = "sift"
    model_path: str | None = None
    annotations: str | None = None
    frames_dir: str | None = None
    out_dir: str = "bench-out"
    # synthetic benchmark
    n_scenes: int = 50
    null_scenes: int = 0
    n_models: int = 5
    model_size: tuple[int, int] = (160, 120)
    n_backgrounds: int = 5
    background_tiles: int = 10
    views_per_model: int = 100
    groups: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in ("sift", "vtree", "cascade"):
            raise ConfigError(f"Unknown method {self.method!r}; expected sift, vtree or cascade")
        if self.n_scenes < 0 or self.null_scenes < 0 or self.n_models < 1 or self.n_backgrounds < 1:
            raise ConfigError("scene counts must be >= 0 and model/background counts >= 1")
        if self.annotations is not None and self.frames_dir is None:
            raise ConfigError("bench.annotations requires bench.frames_dir")


@dataclass(frozen=True)
class HarnessConfig:
    seed: int = _DEFAULT_SEED
    sift: SiftPipelineConfig = field(default_factory=SiftPipelineConfig)
    tree: TreeConfig = field(default_factory=TreeConfig)
    vocab: VocabDetectorConfig = field(default_factory=VocabDetectorConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def features(self) -> ScaleSpaceConfig:
        return self.sift.features


# Flat sections; "features", "match" and "hough" are folded into ``sift``.
_SECTIONS: dict[str, type] = {
    "features": ScaleSpaceConfig,
    "match": MatchConfig,
    "hough": HoughConfig,
    "sift": SiftPipelineConfig,
    "tree": TreeConfig,
    "vocab": VocabDetectorConfig,
    "proposals": ProposalConfig,
    "boost": BoostConfig,
    "scan": ScanConfig,
    "metric": MetricConfig,
    "scene": SceneSpec,
    "bench": BenchConfig,
}
_TOP_LEVEL = ("seed", "sift_preset", "tree_preset")
_NESTED_IN_SIFT = ("features", "match", "hough")


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build(cls: type, values: dict[str, Any], base: Any = None, section: str = "") -> Any:
    """Instance of ``cls`` from ``base`` (or defaults) with ``values`` applied."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    if section == "sift":
        names -= set(_NESTED_IN_SIFT)
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{section}]: {', '.join(unknown)}")
    changes = {k: _coerce(v, getattr(base, k)) for k, v in values.items()}
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid value in [{section}]: {exc}") from exc


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def _apply_override(data: dict[str, Any], override: str) -> None:
    key, sep, raw = override.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override {override!r} is not of the form section.key=value")
    parts = key.strip().split(".")
    if len(parts) == 1:
        if parts[0] not in _TOP_LEVEL:
            raise ConfigError(f"Unknown top-level key {parts[0]!r}")
        data[parts[0]] = _parse_value(raw)
    elif len(parts) == 2:
        section, name = parts
        if section not in _SECTIONS:
            raise ConfigError(f"Unknown config section {section!r}")
        data.setdefault(section, {})[name] = _parse_value(raw)
    else:
        raise ConfigError(f"Override key {key!r} nests too deeply")


def _read_file(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"Failed to parse config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def _with_seed(values: dict[str, Any], cls: type, seed: int) -> dict[str, Any]:
    if "seed" in {f.name for f in dataclasses.fields(cls)} and "seed" not in values:
        return {**values, "seed": seed}
    return values


def load_config(config_path: str | Path | None = None, overrides: Iterable[str] = ()) -> HarnessConfig:
    """Load the harness configuration.

    Order, later wins: built-in defaults, named presets, the JSON file,
    ``PERCEPT_BENCH_SEED``, then ``section.key=value`` overrides. A missing
    file means defaults; anything unreadable or invalid raises ConfigError.
    Sections without an explicit ``seed`` inherit the top-level one.
    """
    data: dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if path.exists():
            data = _read_file(path)
        else:
            logger.info("Config file not found at %s, using defaults", path)

    env_seed = os.environ.get(_SEED_ENV)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"Invalid {_SEED_ENV} value {env_seed!r}") from None

    for override in overrides:
        _apply_override(data, override)

    unknown = sorted(set(data) - set(_SECTIONS) - set(_TOP_LEVEL))
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")
    for name, values in data.items():
        if name in _SECTIONS and not isinstance(values, dict):
            raise ConfigError(f"Config section [{name}] must be an object")

    seed = data.get("seed", _DEFAULT_SEED)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    sift_base = SiftPipelineConfig()
    if "sift_preset" in data:
        try:
            sift_base = SIFT_PRESETS[data["sift_preset"]]
        except (KeyError, TypeError):
            raise ConfigError(f"Unknown sift_preset {data['sift_preset']!r}") from None
    tree_base = TreeConfig()
    if "tree_preset" in data:
        try:
            tree_base = TREE_PRESETS[data["tree_preset"]]
        except (KeyError, TypeError):
            raise ConfigError(f"Unknown tree_preset {data['tree_preset']!r}") from None

    def section(name: str, base: Any = None) -> Any:
        cls = _SECTIONS[name]
        return _build(cls, _with_seed(data.get(name, {}), cls, seed), base, name)

    features = _build(ScaleSpaceConfig, data.get("features", {}), sift_base.features, "features")
    match = section("match", sift_base.match)
    hough = _build(HoughConfig, data.get("hough", {}), sift_base.hough, "hough")
    sift = section("sift", dataclasses.replace(sift_base, features=features, match=match, hough=hough))

    return HarnessConfig(
        seed=seed,
        sift=sift,
        tree=section("tree", tree_base),
        vocab=section("vocab"),
        proposals=section("proposals"),
        boost=section("boost"),
        scan=section("scan"),
        metric=section("metric"),
        scene=section("scene"),
        bench=section("bench"),
    )
