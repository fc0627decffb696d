"""Command-line entry point: train / eval / ablate / infolab.

Each run is driven by one JSON config file; flags only pick the command and
the file. Every artifact lands under the config's out_dir (optionally
re-rooted by the STACKLM_OUT_ROOT environment variable), and a manifest
records the config digest so drift is detectable on resume.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .clip import GlobalClip, LayerwiseClip, equivalent_global_norm
from .config import ConfigError, RunConfig, load_config
from .corpus import BatchedStream, Vocabulary, batchify, build_vocab, read_lines
from .diagnostics import ActivationRecorder, MetricsWriter
from .glsched import PhaseConfig, PhasePlan, TrainData, run_phase, run_schedule
from .infolab import (
    Channel,
    JointTable,
    Quantizer,
    ce_decomposition,
    dpi_chain_check,
    load_matrix,
    network_mi_probe,
    theorem3_check,
)
from .netcore import (
    backward,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)

OUT_ROOT_ENV = "STACKLM_OUT_ROOT"

ABLATION_ARMS = ("full", "wo_lwgc", "wo_gl")


def _resolve_out_dir(configured: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    return Path(root) / configured if root else Path(configured)


def _load_streams(cfg: RunConfig) -> tuple[Vocabulary, dict[str, BatchedStream]]:
    vocab = build_vocab(read_lines(cfg.corpus["train"]))
    streams = {
        split: batchify(vocab.encode(read_lines(path)), cfg.batch_size)
        for split, path in cfg.corpus.items()
    }
    return vocab, streams


def _write_manifest(out_dir: Path, payload: dict) -> None:
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _outcome_rows(outcomes) -> list[dict]:
    return [
        {
            "index": o.phase_index,
            "best_valid_ppl": o.best_valid_ppl,
            "best_epoch": o.best_epoch,
            "epochs_run": len(o.curve),
            "steps": o.steps,
            "resumed": o.resumed,
        }
        for o in outcomes
    ]


def _train_hooks(writer: MetricsWriter, recorder: ActivationRecorder | None, record_phase: int):
    """Per-phase (step, epoch) hook pairs with one global step counter."""
    counter = [0]

    def make(phase: int):
        def on_step(step, params, grads, pre, post, trace):
            counter[0] += 1
            writer.log_group_norms(counter[0], pre, post)
            if recorder is not None and phase == record_phase:
                recorder.record(trace)

        def on_epoch(epoch, params, record):
            writer.log_epoch(phase, epoch, record.train_loss, record.valid_ppl)

        return on_step, on_epoch

    return make


def _run_plan_arm(cfg: RunConfig, plan: PhasePlan, vocab, streams, out_dir: Path):
    """Train a full phased schedule into out_dir with all metrics attached."""
    data = TrainData(streams["train"], streams["valid"], cfg.window)
    diag = cfg.diagnostics
    recorder = ActivationRecorder(
        plan.depth, diag.edges(), diag.window_updates, diag.horizon_updates
    )
    with MetricsWriter(out_dir) as writer:
        make = _train_hooks(writer, recorder, record_phase=plan.depth)
        outcomes = run_schedule(
            plan,
            data,
            vocab_size=vocab.size,
            emb_size=cfg.model.emb_size,
            tied=cfg.model.tied,
            out_dir=out_dir,
            dtype=cfg.model.np_dtype(),
            phase_hooks={k: make(k) for k in range(1, plan.depth + 1)},
        )
        writer.log_histograms(recorder)
        writer.log_drift(recorder)
    vocab.save(out_dir / "vocab.tsv")
    return outcomes


def _scratch_phase_config(plan: PhasePlan) -> PhaseConfig:
    """Deepest architecture trained from step 0: final-phase hyper-parameters
    with the whole schedule's epoch budget."""
    return replace(plan.phases[-1], epochs=sum(p.epochs for p in plan.phases))


def _run_scratch_arm(cfg: RunConfig, plan: PhasePlan, vocab, streams, out_dir: Path):
    data = TrainData(streams["train"], streams["valid"], cfg.window)
    scratch_cfg = _scratch_phase_config(plan)
    init_rng = np.random.default_rng(
        np.random.SeedSequence(plan.phases[0].seed).spawn(2)[0]
    )
    params = init_params(
        vocab.size,
        cfg.model.emb_size,
        [p.hidden_size for p in plan.phases],
        tied=cfg.model.tied,
        init_scale=cfg.model.init_scale,
        seed=init_rng,
        dtype=cfg.model.np_dtype(),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    diag = cfg.diagnostics
    recorder = ActivationRecorder(
        plan.depth, diag.edges(), diag.window_updates, diag.horizon_updates
    )
    with MetricsWriter(out_dir) as writer:
        make = _train_hooks(writer, recorder, record_phase=plan.depth)
        on_step, on_epoch = make(plan.depth)
        outcome = run_phase(params, scratch_cfg, data, on_step=on_step, on_epoch=on_epoch)
        writer.log_histograms(recorder)
        writer.log_drift(recorder)
    save_checkpoint(
        out_dir / f"phase-{plan.depth}-best.npz",
        outcome.params,
        phase_index=plan.depth,
        seed=scratch_cfg.seed,
    )
    vocab.save(out_dir / "vocab.tsv")
    return outcome


def cmd_train(args) -> int:
    cfg, digest = load_config(args.config)
    out_dir = _resolve_out_dir(cfg.out_dir)
    t0 = time.perf_counter()
    vocab, streams = _load_streams(cfg)
    outcomes = _run_plan_arm(cfg, cfg.plan(), vocab, streams, out_dir)
    _write_manifest(
        out_dir,
        {
            "command": "train",
            "version": __version__,
            "config_sha256": digest,
            "vocab_size": vocab.size,
            "phases": _outcome_rows(outcomes),
            "wall_clock_s": time.perf_counter() - t0,
        },
    )
    for o in outcomes:
        tag = " [resumed]" if o.resumed else ""
        print(
            f"phase {o.phase_index}: best valid ppl {o.best_valid_ppl:.3f} "
            f"(epoch {o.best_epoch}, {o.steps} steps){tag}"
        )
    print(f"wrote {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg, digest = load_config(args.config)
    if args.split not in cfg.corpus:
        print(f"error: config has no corpus split {args.split!r}", file=sys.stderr)
        return 2
    out_dir = _resolve_out_dir(cfg.out_dir)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / f"phase-{cfg.depth}-best.npz"
    params, meta = load_checkpoint(checkpoint)
    vocab, streams = _load_streams(cfg)
    if meta["vocab_size"] != vocab.size:
        print(
            f"error: vocabulary mismatch: checkpoint has {meta['vocab_size']} "
            f"tokens, corpus gives {vocab.size}",
            file=sys.stderr,
        )
        return 2
    stream = streams[args.split]
    ppl = evaluate(params, stream, cfg.window)
    tokens = stream.batch_size * (stream.total_steps - 1)
    report = {
        "split": args.split,
        "checkpoint": str(checkpoint),
        "token_count": tokens,
        "nll_per_token": math.log(ppl),
        "perplexity": ppl,
        "config_sha256": digest,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"eval-{args.split}.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{args.split}: perplexity {ppl:.4f} over {tokens} tokens")
    return 0


def _wo_lwgc_plan(plan: PhasePlan) -> PhasePlan:
    phases = []
    for p in plan.phases:
        clip = p.clip
        if isinstance(clip, LayerwiseClip):
            clip = GlobalClip(equivalent_global_norm(clip.max_norms))
        phases.append(replace(p, clip=clip))
    return PhasePlan(tuple(phases))


def cmd_ablate(args) -> int:
    cfg, digest = load_config(args.config)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown or not arms:
        print(f"error: unknown arms {unknown}; choose from {ABLATION_ARMS}", file=sys.stderr)
        return 2
    out_dir = _resolve_out_dir(cfg.out_dir)
    t0 = time.perf_counter()
    vocab, streams = _load_streams(cfg)
    plan = cfg.plan()

    rows = []
    for arm in arms:
        arm_dir = out_dir / f"arm-{arm}"
        if arm == "full":
            outcomes = _run_plan_arm(cfg, plan, vocab, streams, arm_dir)
            best = outcomes[-1]
        elif arm == "wo_lwgc":
            outcomes = _run_plan_arm(cfg, _wo_lwgc_plan(plan), vocab, streams, arm_dir)
            best = outcomes[-1]
        else:
            best = _run_scratch_arm(cfg, plan, vocab, streams, arm_dir)
        row = {"arm": arm, "best_valid_ppl": best.best_valid_ppl}
        if "test" in streams:
            row["test_ppl"] = evaluate(best.params, streams["test"], cfg.window)
        rows.append(row)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        cols = ["arm", "best_valid_ppl"] + (["test_ppl"] if "test" in streams else [])
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(
                row["arm"] if c == "arm" else repr(float(row[c])) for c in cols
            ) + "\n")
    _write_manifest(
        out_dir,
        {
            "command": "ablate",
            "version": __version__,
            "config_sha256": digest,
            "arms": rows,
            "wall_clock_s": time.perf_counter() - t0,
        },
    )
    for row in rows:
        extra = f", test ppl {row['test_ppl']:.3f}" if "test_ppl" in row else ""
        print(f"{row['arm']}: best valid ppl {row['best_valid_ppl']:.3f}{extra}")
    print(f"wrote {out_dir}")
    return 0


def _load_channel(path: Path) -> Channel:
    return Channel(load_matrix(path))


def _run_case(case: dict, base: Path) -> tuple[bool, str]:
    joint = JointTable(load_matrix(base / case["joint"]))
    channels = [_load_channel(base / p) for p in case.get("channels", [])]
    check = case["check"]
    if check == "ce":
        model = load_matrix(base / case["model"])
        d = ce_decomposition(joint, channels[0], model)
        ok = d.cross_entropy >= d.h_y_given_x - 1e-12
        return ok, (
            f"ce={d.cross_entropy!r} h={d.h_y_given_x!r} kl={d.kl_term!r}"
        )
    if check == "dpi":
        mis = dpi_chain_check(joint, channels)
        return True, "mi=" + "/".join(repr(v) for v in mis)
    if check == "theorem3":
        report = theorem3_check(joint, channels)
        expect = bool(case["expect_holds"])
        ok = report.holds == expect
        if not expect and ok:
            ok = max(report.gaps) > 1e-10  # a lossy chain must show a real gap
        return ok, (
            f"holds={report.holds} gaps=" + "/".join(repr(g) for g in report.gaps)
        )
    raise ValueError(f"unknown check kind {check!r}")


def _parity_dataset() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All 4-bit sequences; targets are the running parity at each position."""
    n_bits = 4
    inputs = np.array(
        [[(i >> b) & 1 for b in range(n_bits)] for i in range(2 ** n_bits)],
        dtype=np.int64,
    )
    targets = np.bitwise_xor.accumulate(inputs, axis=1)
    labels = targets[:, -1].copy()
    return inputs, targets, labels


def cmd_infolab(args) -> int:
    out_dir = _resolve_out_dir(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0

    if args.probe:
        inputs, targets, labels = _parity_dataset()
        params = init_params(
            2, 16, [16, 16], init_scale=0.1, seed=args.seed, dtype=np.float64
        )
        quantizer = Quantizer()
        with MetricsWriter(out_dir) as writer:
            mis = network_mi_probe(params, quantizer, inputs, labels)
            writer.log_mi(0, mis)
            for epoch in range(1, args.epochs + 1):
                trace, _ = forward(params, inputs, targets)
                grads = backward(params, trace)
                sgd_step(params, grads, args.lr)
                if epoch % args.probe_every == 0 or epoch == args.epochs:
                    mis = network_mi_probe(params, quantizer, inputs, labels)
                    writer.log_mi(epoch, mis)
        print("final MI (bits): " + " ".join(f"{v:.4f}" for v in mis))
        print(f"wrote {out_dir}")
        return 0

    cases_path = Path(args.cases)
    try:
        cases = json.loads(cases_path.read_text())
    except OSError as exc:
        print(f"error: cannot read {cases_path}: {exc}", file=sys.stderr)
        return 2
    base = cases_path.parent
    with open(out_dir / "results.csv", "w", newline="") as fh:
        fh.write("case,check,passed,detail\n")
        for case in cases:
            try:
                ok, detail = _run_case(case, base)
            except (ValueError, ArithmeticError) as exc:
                ok, detail = False, str(exc)
            if not ok:
                failures += 1
            detail = detail.replace(",", ";")
            fh.write(f"{case['name']},{case['check']},{int(ok)},{detail}\n")
            status = "ok" if ok else "FAIL"
            print(f"{status:4} {case['name']}: {detail}")
    print(f"wrote {out_dir / 'results.csv'}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stacklm",
        description="Phased-depth LSTM language model trainer with per-group "
        "gradient clipping and an exact information lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the phased training schedule")
    p_train.add_argument("config", help="JSON run config")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p_eval.add_argument("config", help="JSON run config")
    p_eval.add_argument("--checkpoint", default=None, help="defaults to the final phase's best")
    p_eval.add_argument("--split", default="test")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="train method-removal arms side by side")
    p_abl.add_argument("config", help="JSON run config")
    p_abl.add_argument("--arms", default=",".join(ABLATION_ARMS))
    p_abl.set_defaults(func=cmd_ablate)

    p_info = sub.add_parser("infolab", help="run exact information-theory checks")
    p_info.add_argument("--cases", default="data/infolab/cases.json")
    p_info.add_argument("--out", default="runs/infolab")
    p_info.add_argument("--probe", action="store_true", help="train the parity toy and probe MI per layer")
    p_info.add_argument("--epochs", type=int, default=400)
    p_info.add_argument("--lr", type=float, default=2.0)
    p_info.add_argument("--probe-every", type=int, default=20)
    p_info.add_argument("--seed", type=int, default=3)
    p_info.set_defaults(func=cmd_infolab)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
