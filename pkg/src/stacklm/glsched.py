"""Phased depth growth for the stacked LSTM.

Training runs in phases 1..L. Phase 1 trains a single layer; each later
phase adds one randomly initialized layer on top, inherits every shallower
layer's weights bit-for-bit from the previous phase's best checkpoint, and
then trains ALL layers (nothing is frozen). The softmax head is either
inherited or re-initialized per phase.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .clip import GlobalClip, LayerwiseClip, apply_policy, group_norms
from .corpus import BatchedStream, bptt_windows
from .netcore import (
    CarryState,
    DropoutMasks,
    KeepProbs,
    NetworkParams,
    evaluate,
    forward,
    backward,
    init_params,
    load_checkpoint,
    sample_masks,
    save_checkpoint,
    sgd_step,
)

__all__ = [
    "PhaseConfig",
    "PhasePlan",
    "PhaseOutcome",
    "EpochRecord",
    "TrainData",
    "grow",
    "run_phase",
    "run_schedule",
    "phase_hash",
]

ClipPolicy = GlobalClip | LayerwiseClip

SCHEDULE_MANIFEST = "schedule.json"


@dataclass(frozen=True)
class PhaseConfig:
    """Everything one phase needs; `layer_count` is the depth DURING the phase."""

    layer_count: int
    hidden_size: int          # width of the layer added for this phase
    epochs: int
    lr: float
    clip: ClipPolicy | None = None
    keep: KeepProbs = field(default_factory=KeepProbs)
    softmax_init: str = "inherit"
    seed: int = 0
    patience: int = 5
    init_scale: float = 0.1

    def __post_init__(self):
        if self.layer_count < 1 or self.hidden_size < 1:
            raise ValueError("layer count and hidden size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.softmax_init not in ("inherit", "random"):
            raise ValueError("softmax_init must be 'inherit' or 'random'")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[PhaseConfig, ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("empty plan")
        for k, cfg in enumerate(self.phases, 1):
            if cfg.layer_count != k:
                raise ValueError(
                    f"phase {k} must train {k} layers, config says {cfg.layer_count}"
                )
            if isinstance(cfg.clip, LayerwiseClip):
                want = {"embedding", "softmax"} | {f"layer_{i}" for i in range(1, k + 1)}
                got = set(cfg.clip.max_norms)
                if got != want:
                    raise ValueError(
                        f"phase {k} clip groups {sorted(got)} do not match the "
                        f"phase's parameter groups {sorted(want)}"
                    )

    @property
    def depth(self) -> int:
        return len(self.phases)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float   # mean NLL per token, nats
    valid_ppl: float


@dataclass
class PhaseOutcome:
    phase_index: int
    params: NetworkParams          # best-validation parameters
    curve: list[EpochRecord]
    best_valid_ppl: float
    best_epoch: int                # 0 when no epoch ran
    steps: int
    wall_clock_s: float
    resumed: bool = False


@dataclass(frozen=True)
class TrainData:
    train: BatchedStream
    valid: BatchedStream
    window: int


def grow(
    params: NetworkParams,
    hidden_size: int,
    softmax_init: str = "inherit",
    seed: int | np.random.SeedSequence | np.random.Generator = 0,
    *,
    init_scale: float = 0.1,
) -> NetworkParams:
    """Add one fresh layer on top; everything below is copied bit-for-bit."""
    if hidden_size < 1:
        raise ValueError("hidden size must be positive")
    if softmax_init not in ("inherit", "random"):
        raise ValueError("softmax_init must be 'inherit' or 'random'")
    if params.tied:
        # The softmax weight IS the embedding; re-randomizing it would wipe
        # learned state, and any new top width must keep the tie legal.
        if softmax_init == "random":
            raise ValueError("cannot randomize a tied softmax")
        if hidden_size != params.emb_size:
            raise ValueError("softmax inheritance size mismatch")
    elif softmax_init == "inherit" and hidden_size != params.hidden_sizes[-1]:
        raise ValueError("softmax inheritance size mismatch")

    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    grown = params.copy()
    d_in = params.hidden_sizes[-1]
    fresh = init_params(
        2, d_in, [hidden_size], init_scale=init_scale, seed=rng, dtype=params.dtype
    ).layers[0]
    grown.layers.append(fresh)
    if softmax_init == "random" and not params.tied:
        grown.softmax_w = rng.uniform(
            -init_scale, init_scale, size=(params.vocab_size, hidden_size)
        ).astype(params.dtype)
        grown.softmax_b = np.zeros(params.vocab_size, dtype=params.dtype)
    return grown


StepHook = Callable[[int, NetworkParams, object, dict, dict, object], None]
EpochHook = Callable[[int, NetworkParams, EpochRecord], None]


def run_phase(
    params: NetworkParams,
    cfg: PhaseConfig,
    data: TrainData,
    *,
    on_step: StepHook | None = None,
    on_epoch: EpochHook | None = None,
) -> PhaseOutcome:
    """Plain SGD epochs with per-window variational masks and clipping.

    Tracks the best validation perplexity and returns those parameters; stops
    early after `cfg.patience` epochs without improvement.
    """
    if params.layer_count != cfg.layer_count:
        raise ValueError(
            f"phase expects {cfg.layer_count} layers, params have {params.layer_count}"
        )
    t0 = time.perf_counter()
    if cfg.epochs == 0:
        best = params.copy()
        ppl = evaluate(best, data.valid, data.window)
        return PhaseOutcome(
            cfg.layer_count, best, [], ppl, 0, 0, time.perf_counter() - t0
        )

    mask_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    B = data.train.batch_size
    curve: list[EpochRecord] = []
    best_params = params.copy()
    best_ppl = float("inf")
    best_epoch = 0
    since_best = 0
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        carry = CarryState.zeros(params, B)
        nll = 0.0
        tokens = 0
        for x, y in bptt_windows(data.train, data.window):
            if x.shape[0] != B:
                continue
            masks = sample_masks(params, B, cfg.keep, mask_rng)
            step += 1
            try:
                trace, _ = forward(params, x, y, carry, masks)
                grads = backward(params, trace)
                pre = group_norms(grads) if on_step is not None else None
                if cfg.clip is not None:
                    apply_policy(grads, cfg.clip)
                sgd_step(params, grads, cfg.lr)
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                raise RuntimeError(
                    f"phase {cfg.layer_count}, epoch {epoch}, step {step}: {exc}"
                ) from exc
            carry = trace.carry_out
            nll += trace.nll_sum
            tokens += trace.n_positions
            if on_step is not None:
                on_step(step, params, grads, pre, group_norms(grads), trace)
        train_loss = nll / tokens if tokens else float("nan")
        valid_ppl = evaluate(params, data.valid, data.window)
        record = EpochRecord(epoch, train_loss, valid_ppl)
        curve.append(record)
        if on_epoch is not None:
            on_epoch(epoch, params, record)
        if valid_ppl < best_ppl:
            best_ppl = valid_ppl
            best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    return PhaseOutcome(
        cfg.layer_count, best_params, curve, best_ppl, best_epoch, step,
        time.perf_counter() - t0,
    )


def _clip_to_json(clip: ClipPolicy | None):
    if clip is None:
        return None
    if isinstance(clip, GlobalClip):
        return {"kind": "global", "max_norm": clip.max_norm}
    return {"kind": "layerwise", "max_norms": dict(sorted(clip.max_norms.items()))}


def phase_hash(cfg: PhaseConfig, prev_hash: str) -> str:
    """Chained digest: any change to this or an earlier phase changes it."""
    payload = {
        "layer_count": cfg.layer_count,
        "hidden_size": cfg.hidden_size,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "clip": _clip_to_json(cfg.clip),
        "keep": cfg.keep.as_dict(),
        "softmax_init": cfg.softmax_init,
        "seed": cfg.seed,
        "patience": cfg.patience,
        "init_scale": cfg.init_scale,
        "prev": prev_hash,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _load_manifest(out_dir: Path) -> list[dict]:
    path = out_dir / SCHEDULE_MANIFEST
    if not path.exists():
        return []
    return json.loads(path.read_text())["phases"]


def _write_manifest(out_dir: Path, entries: list[dict]) -> None:
    (out_dir / SCHEDULE_MANIFEST).write_text(
        json.dumps({"phases": entries}, indent=2, sort_keys=True) + "\n"
    )


def run_schedule(
    plan: PhasePlan,
    data: TrainData,
    *,
    vocab_size: int,
    emb_size: int,
    tied: bool = False,
    out_dir: str | Path | None = None,
    dtype: np.dtype | type = np.float64,
    on_step: StepHook | None = None,
    on_epoch: EpochHook | None = None,
    phase_hooks: dict[int, tuple[StepHook | None, EpochHook | None]] | None = None,
) -> list[PhaseOutcome]:
    """Run every phase in order, persisting per-phase best checkpoints.

    With an out_dir, completed phases whose chained config hash matches the
    on-disk manifest are skipped and their checkpoints reloaded, so a killed
    schedule resumes where it stopped and reproduces the same states.
    Per-phase hooks (keyed by phase index) override the schedule-wide ones.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    old_entries = _load_manifest(out_path) if out_path is not None else []
    entries: list[dict] = []

    outcomes: list[PhaseOutcome] = []
    params: NetworkParams | None = None
    prev_hash = ""
    for k, cfg in enumerate(plan.phases, 1):
        h = phase_hash(cfg, prev_hash)
        ckpt = out_path / f"phase-{k}-best.npz" if out_path is not None else None

        reusable = (
            ckpt is not None
            and len(old_entries) >= k
            and old_entries[k - 1].get("hash") == h
            and ckpt.exists()
        )
        if reusable:
            params, meta = load_checkpoint(ckpt)
            outcomes.append(
                PhaseOutcome(
                    k, params.copy(), [], old_entries[k - 1]["best_valid_ppl"],
                    old_entries[k - 1].get("best_epoch", 0),
                    old_entries[k - 1].get("steps", 0), 0.0, resumed=True,
                )
            )
            entries.append(old_entries[k - 1])
            prev_hash = h
            continue

        init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
        if k == 1:
            params = init_params(
                vocab_size, emb_size, [cfg.hidden_size], tied=tied,
                init_scale=cfg.init_scale, seed=init_rng, dtype=dtype,
            )
        else:
            assert params is not None
            params = grow(
                params, cfg.hidden_size, cfg.softmax_init, init_rng,
                init_scale=cfg.init_scale,
            )

        step_hook, epoch_hook = on_step, on_epoch
        if phase_hooks and k in phase_hooks:
            step_hook, epoch_hook = phase_hooks[k]
        outcome = run_phase(params, cfg, data, on_step=step_hook, on_epoch=epoch_hook)
        outcomes.append(outcome)
        params = outcome.params

        entry = {
            "index": k,
            "hash": h,
            "best_valid_ppl": outcome.best_valid_ppl,
            "best_epoch": outcome.best_epoch,
            "steps": outcome.steps,
            "epochs_run": len(outcome.curve),
        }
        entries.append(entry)
        if ckpt is not None:
            save_checkpoint(ckpt, params, phase_index=k, seed=cfg.seed)
            _write_manifest(out_path, entries)
        prev_hash = h
    return outcomes
