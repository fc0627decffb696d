"""Run configuration: one JSON file drives a whole training run.

Everything stochastic in a run traces back to the seeds named here, and the
config file's digest goes into the run manifest, so a run is reproducible
from the file alone. Validation happens up front, before any corpus I/O or
training work.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clip import GlobalClip, LayerwiseClip
from .glsched import PhaseConfig, PhasePlan
from .netcore import KeepProbs

__all__ = [
    "ConfigError",
    "ModelConfig",
    "DiagnosticsConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "config_digest",
]


class ConfigError(ValueError):
    """A config file failed validation; nothing has been run."""


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return mapping[key]


def _opt_number(mapping: dict, key: str, default, where: str):
    v = mapping.get(key, default)
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{where}: {key!r} must be a number")
    return v


@dataclass(frozen=True)
class ModelConfig:
    emb_size: int
    tied: bool = False
    init_scale: float = 0.1
    dtype: str = "float64"

    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class DiagnosticsConfig:
    bins: int = 50
    value_range: tuple[float, float] = (-1.0, 1.0)
    window_updates: int = 20
    horizon_updates: int = 500

    def edges(self) -> np.ndarray:
        lo, hi = self.value_range
        return np.linspace(lo, hi, self.bins + 1)


@dataclass(frozen=True)
class RunConfig:
    corpus: dict[str, str]             # split name -> path
    model: ModelConfig
    batch_size: int
    window: int
    phases: tuple[PhaseConfig, ...]
    out_dir: str
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def plan(self) -> PhasePlan:
        return PhasePlan(self.phases)

    @property
    def depth(self) -> int:
        return len(self.phases)


def _parse_clip(raw, where: str):
    if raw is None:
        return None
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError(f"{where}: clip must be null or an object with a 'kind'")
    kind = raw["kind"]
    try:
        if kind == "global":
            return GlobalClip(float(_require(raw, "max_norm", where)))
        if kind == "layerwise":
            norms = _require(raw, "max_norms", where)
            if not isinstance(norms, dict) or not norms:
                raise ConfigError(f"{where}: max_norms must be a non-empty object")
            return LayerwiseClip({str(k): float(v) for k, v in norms.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unknown clip kind {kind!r}")


def _parse_keep(raw, where: str) -> KeepProbs:
    if raw is None:
        return KeepProbs()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: keep must be an object")
    known = {"emb_rows", "layer_input", "recurrent", "output"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keep probabilities {sorted(unknown)}")
    kwargs = {k: _opt_number(raw, k, 1.0, where) for k in known}
    for k, v in kwargs.items():
        if not (0.0 < v <= 1.0):
            raise ConfigError(f"{where}: keep probability {k!r} must be in (0, 1]")
    return KeepProbs(**kwargs)


def _parse_phase(raw: dict, index: int, model: ModelConfig, base_seed: int) -> PhaseConfig:
    where = f"phases[{index - 1}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: must be an object")
    try:
        return PhaseConfig(
            layer_count=index,
            hidden_size=int(_require(raw, "hidden_size", where)),
            epochs=int(_require(raw, "epochs", where)),
            lr=float(_require(raw, "lr", where)),
            clip=_parse_clip(raw.get("clip"), where),
            keep=_parse_keep(raw.get("keep"), where),
            softmax_init=str(raw.get("softmax_init", "inherit")),
            seed=int(raw.get("seed", base_seed + index)),
            patience=int(raw.get("patience", 5)),
            init_scale=float(raw.get("init_scale", model.init_scale)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: dict, *, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed JSON tree into a RunConfig. Paths stay as written
    except that relative ones are anchored at base_dir when given."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")

    corpus_raw = _require(raw, "corpus", "config")
    if not isinstance(corpus_raw, dict) or "train" not in corpus_raw or "valid" not in corpus_raw:
        raise ConfigError("corpus must be an object with at least 'train' and 'valid' paths")
    corpus = {}
    for split, path in corpus_raw.items():
        if not isinstance(path, str):
            raise ConfigError(f"corpus.{split}: path must be a string")
        p = Path(path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        corpus[split] = str(p)

    model_raw = _require(raw, "model", "config")
    if not isinstance(model_raw, dict):
        raise ConfigError("model must be an object")
    try:
        model = ModelConfig(
            emb_size=int(_require(model_raw, "emb_size", "model")),
            tied=bool(model_raw.get("tied", False)),
            init_scale=float(model_raw.get("init_scale", 0.1)),
            dtype=str(model_raw.get("dtype", "float64")),
        )
        model.np_dtype()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    if model.emb_size < 1:
        raise ConfigError("model.emb_size must be positive")
    if model.dtype not in ("float32", "float64"):
        raise ConfigError("model.dtype must be 'float32' or 'float64'")

    _require(raw, "batch_size", "config")
    _require(raw, "window", "config")
    batch_size = int(_opt_number(raw, "batch_size", 1, "config"))
    window = int(_opt_number(raw, "window", 1, "config"))
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if window < 1:
        raise ConfigError("window must be >= 1")

    base_seed = int(raw.get("seed", 0))
    phases_raw = _require(raw, "phases", "config")
    if not isinstance(phases_raw, list) or not phases_raw:
        raise ConfigError("phases must be a non-empty list")
    phases = tuple(
        _parse_phase(p, i, model, base_seed) for i, p in enumerate(phases_raw, 1)
    )
    if model.tied:
        for i, ph in enumerate(phases, 1):
            if ph.hidden_size != model.emb_size:
                raise ConfigError(
                    f"phases[{i - 1}]: tied softmax needs hidden_size == emb_size "
                    f"({ph.hidden_size} != {model.emb_size})"
                )

    diag_raw = raw.get("diagnostics", {})
    if not isinstance(diag_raw, dict):
        raise ConfigError("diagnostics must be an object")
    rng_raw = diag_raw.get("range", [-1.0, 1.0])
    if not (isinstance(rng_raw, list) and len(rng_raw) == 2 and rng_raw[0] < rng_raw[1]):
        raise ConfigError("diagnostics.range must be [low, high] with low < high")
    diagnostics = DiagnosticsConfig(
        bins=int(_opt_number(diag_raw, "bins", 50, "diagnostics")),
        value_range=(float(rng_raw[0]), float(rng_raw[1])),
        window_updates=int(_opt_number(diag_raw, "window_updates", 20, "diagnostics")),
        horizon_updates=int(_opt_number(diag_raw, "horizon_updates", 500, "diagnostics")),
    )
    if diagnostics.bins < 1:
        raise ConfigError("diagnostics.bins must be >= 1")

    out_dir = str(_require(raw, "out_dir", "config"))

    cfg = RunConfig(
        corpus=corpus,
        model=model,
        batch_size=batch_size,
        window=window,
        phases=phases,
        out_dir=out_dir,
        diagnostics=diagnostics,
    )
    try:
        cfg.plan()  # cross-checks clip groups against per-phase depth
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: str | Path) -> tuple[RunConfig, str]:
    """Read, validate, and digest a config file; returns (config, sha256)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    cfg = parse_config(raw, base_dir=path.parent)
    return cfg, config_digest(text)


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
