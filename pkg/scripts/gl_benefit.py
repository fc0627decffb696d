#!/usr/bin/env python3
"""Phase-wise depth growth vs training the deep net from scratch.

Runs the `full` and `wo_gl` arms of a bundled config side by side and prints
the comparison table plus the unigram baseline, so the benefit (or lack of
it) is visible against the floor a memoryless model already reaches. The
same comparison gates the acceptance suite; this script is for poking at
seeds and budgets interactively.

    python3 scripts/gl_benefit.py                      # bundled 2-phase config
    python3 scripts/gl_benefit.py --config configs/toy_gl3.json --seed 77
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stacklm.cli import main as cli_main
from stacklm.corpus import build_vocab, read_lines

REPO = Path(__file__).resolve().parent.parent


def unigram_ppl(train_path: Path) -> float:
    vocab = build_vocab(read_lines(train_path))
    ids = vocab.encode(read_lines(train_path))
    counts = np.bincount(ids, minlength=vocab.size).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(REPO / "configs" / "toy_gl2.json"))
    ap.add_argument("--seed", type=int, default=None, help="override the config's base seed")
    ap.add_argument("--out", default=None, help="output root (default: a temp dir)")
    args = ap.parse_args()

    cfg_path = Path(args.config)
    raw = json.loads(cfg_path.read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
        for k, phase in enumerate(raw["phases"]):
            phase.pop("seed", None)  # fall back to base seed + index
        tmp = Path(tempfile.mkdtemp(prefix="gl-benefit-")) / cfg_path.name
        # corpus paths were relative to the original config's directory
        raw["corpus"] = {
            s: str((cfg_path.parent / p).resolve()) for s, p in raw["corpus"].items()
        }
        tmp.write_text(json.dumps(raw, indent=2) + "\n")
        cfg_path = tmp

    out_root = args.out or tempfile.mkdtemp(prefix="gl-benefit-runs-")
    os.environ["STACKLM_OUT_ROOT"] = out_root
    rc = cli_main(["ablate", str(cfg_path), "--arms", "full,wo_gl"])
    if rc != 0:
        return rc

    out_dir = Path(out_root) / raw["out_dir"]
    print()
    print((out_dir / "ablation.csv").read_text().strip())
    train = Path(raw["corpus"]["train"])
    if not train.is_absolute():
        train = cfg_path.parent / train
    print(f"unigram baseline ppl: {unigram_ppl(train):.2f}")
    print(f"artifacts under {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
