#!/usr/bin/env python3
"""Generate the bundled toy corpus: ~100KB train, ~10KB valid/test.

Sentences come from a small seeded phrase grammar, so the text has real
syntactic structure (agreement-free English-ish clauses) that a short-window
LSTM can exploit well beyond unigram statistics. Regenerating with the same
seed reproduces the files byte for byte.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

DETS = ["the", "a", "every", "some", "this", "no"]
ADJS = [
    "old", "small", "bright", "quiet", "heavy", "green", "narrow", "warm",
    "broken", "patient", "hollow", "distant", "sudden", "careful", "pale",
]
NOUNS = [
    "miller", "river", "lantern", "garden", "letter", "bridge", "winter",
    "doctor", "market", "shadow", "engine", "harbor", "needle", "orchard",
    "sparrow", "cellar", "ladder", "mirror", "painter", "valley", "anchor",
    "basket", "chimney", "fiddle", "meadow", "pebble", "saddle", "thicket",
    "weaver", "kettle",
]
VERBS_T = [
    "watched", "carried", "followed", "mended", "crossed", "painted",
    "borrowed", "gathered", "remembered", "traded", "sheltered", "measured",
]
VERBS_I = [
    "slept", "waited", "wandered", "returned", "trembled", "vanished",
    "listened", "rested",
]
PREPS = ["near", "beyond", "under", "behind", "beside", "toward"]
ADVS = ["slowly", "quietly", "again", "at last", "all night", "by morning"]


def noun_phrase(rng: np.random.Generator) -> str:
    words = [DETS[rng.integers(len(DETS))]]
    if rng.random() < 0.55:
        words.append(ADJS[rng.integers(len(ADJS))])
    if rng.random() < 0.12:
        words.append(ADJS[rng.integers(len(ADJS))])
    words.append(NOUNS[rng.integers(len(NOUNS))])
    return " ".join(words)


def prep_phrase(rng: np.random.Generator) -> str:
    return f"{PREPS[rng.integers(len(PREPS))]} {noun_phrase(rng)}"


def sentence(rng: np.random.Generator) -> str:
    subj = noun_phrase(rng)
    if rng.random() < 0.6:
        verb = VERBS_T[rng.integers(len(VERBS_T))]
        clause = f"{subj} {verb} {noun_phrase(rng)}"
    else:
        clause = f"{subj} {VERBS_I[rng.integers(len(VERBS_I))]}"
    if rng.random() < 0.45:
        clause += f" {prep_phrase(rng)}"
    if rng.random() < 0.25:
        clause += f" {ADVS[rng.integers(len(ADVS))]}"
    if rng.random() < 0.18:
        verb = VERBS_I[rng.integers(len(VERBS_I))]
        clause += f" and {noun_phrase(rng)} {verb}"
    return clause


def emit(path: Path, rng: np.random.Generator, target_bytes: int) -> None:
    lines: list[str] = []
    size = 0
    while size < target_bytes:
        line = sentence(rng)
        lines.append(line)
        size += len(line) + 1
    path.write_text("\n".join(lines) + "\n")
    print(f"{path}: {size} bytes, {len(lines)} lines")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/toy")
    parser.add_argument("--seed", type=int, default=20240811)
    parser.add_argument("--train-bytes", type=int, default=100_000)
    parser.add_argument("--eval-bytes", type=int, default=10_000)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(args.seed)
    for name, child, size in zip(
        ("train", "valid", "test"),
        root.spawn(3),
        (args.train_bytes, args.eval_bytes, args.eval_bytes),
    ):
        emit(out / f"{name}.txt", np.random.default_rng(child), size)


if __name__ == "__main__":
    main()
