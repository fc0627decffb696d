#!/usr/bin/env python3
"""Write the bundled information-lab fixture suite.

All probabilities are dyadic rationals (multiples of 1/16), so every row and
table sums to exactly 1.0 in float64 and the checks hit their tolerances with
no rounding slack needed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from stacklm.infolab import save_matrix

OUT = Path("data/infolab")


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)

    # Correlated binary joint: p(y|x) rows are (3/4, 1/4) and (1/4, 3/4).
    save_matrix(OUT / "joint_corr2.txt", np.array([[0.375, 0.125], [0.125, 0.375]]))
    save_matrix(OUT / "chan_ident2.txt", np.eye(2))
    save_matrix(OUT / "model_post2.txt", np.array([[0.75, 0.25], [0.25, 0.75]]))
    save_matrix(OUT / "model_unif2.txt", np.full((2, 2), 0.5))

    # 4x3 joint with asymmetric structure, entries in sixteenths.
    save_matrix(
        OUT / "joint_4x3.txt",
        np.array([[3, 1, 0], [0, 3, 1], [1, 0, 3], [2, 1, 1]]) / 16.0,
    )
    save_matrix(
        OUT / "chan_noisy4.txt",
        np.array(
            [
                [0.5, 0.25, 0.125, 0.125],
                [0.125, 0.5, 0.25, 0.125],
                [0.125, 0.125, 0.5, 0.25],
                [0.25, 0.125, 0.125, 0.5],
            ]
        ),
    )
    save_matrix(
        OUT / "chan_merge42.txt",
        np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float),
    )
    save_matrix(
        OUT / "chan_perm4a.txt", np.eye(4)[[2, 0, 3, 1]].astype(float)
    )
    save_matrix(
        OUT / "chan_perm4b.txt", np.eye(4)[[1, 3, 0, 2]].astype(float)
    )

    # Y == X on two symbols; collapsing X to one symbol destroys the bit.
    save_matrix(OUT / "joint_diag2.txt", np.array([[0.5, 0.0], [0.0, 0.5]]))
    save_matrix(OUT / "chan_collapse21.txt", np.array([[1.0], [1.0]]))

    # x1 and x2 share p(y|x) = (1/2, 1/2); merging exactly those two is lossless.
    save_matrix(
        OUT / "joint_suff.txt",
        np.array([[0.125, 0.125], [0.125, 0.125], [0.25, 0.0], [0.0, 0.25]]),
    )
    save_matrix(
        OUT / "chan_suff43.txt",
        np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float),
    )

    cases = [
        {
            "name": "ce_optimal_model",
            "check": "ce",
            "joint": "joint_corr2.txt",
            "channels": ["chan_ident2.txt"],
            "model": "model_post2.txt",
        },
        {
            "name": "ce_uniform_model",
            "check": "ce",
            "joint": "joint_corr2.txt",
            "channels": ["chan_ident2.txt"],
            "model": "model_unif2.txt",
        },
        {
            "name": "dpi_noisy_then_merge",
            "check": "dpi",
            "joint": "joint_4x3.txt",
            "channels": ["chan_noisy4.txt", "chan_merge42.txt"],
        },
        {
            "name": "theorem3_permutations",
            "check": "theorem3",
            "joint": "joint_4x3.txt",
            "channels": ["chan_perm4a.txt", "chan_perm4b.txt"],
            "expect_holds": True,
        },
        {
            "name": "theorem3_lossy_collapse",
            "check": "theorem3",
            "joint": "joint_diag2.txt",
            "channels": ["chan_collapse21.txt"],
            "expect_holds": False,
        },
        {
            "name": "theorem3_sufficient_collapse",
            "check": "theorem3",
            "joint": "joint_suff.txt",
            "channels": ["chan_suff43.txt"],
            "expect_holds": True,
        },
    ]
    (OUT / "cases.json").write_text(json.dumps(cases, indent=2) + "\n")
    print(f"wrote {len(cases)} cases under {OUT}")


if __name__ == "__main__":
    main()
