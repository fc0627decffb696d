"""End-to-end acceptance gate: nine numbered criteria, one test each.

Criteria 1-6 are exact property checks at pinned tolerances. Criteria 7 and 8
run the bundled desk-scale experiments; 7 gates on the outcome, 8 reports the
measured direction and gates only on the artifacts (the effect is real but
small, so CI asserts the pipeline, not the sign). Criterion 9 is byte-level
determinism of a full CLI run.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from stacklm.cli import main
from stacklm.clip import (
    LayerwiseClip,
    equivalent_global_norm,
    global_clip,
    group_norms,
    layerwise_clip,
)
from stacklm.corpus import batchify, build_vocab, read_lines
from stacklm.glsched import PhaseConfig, PhasePlan, TrainData, grow, run_schedule
from stacklm.infolab import (
    Channel,
    JointTable,
    ce_decomposition,
    dpi_chain_check,
    induced_posterior,
    theorem3_check,
)
from stacklm.netcore import backward, forward, init_params, load_checkpoint

from conftest import fd_max_relerr, random_setup

REPO = Path(__file__).resolve().parent.parent
TOY = REPO / "data" / "toy"


def test_criterion_1_gradient_exactness():
    """BPTT vs central finite differences on 20 random configurations."""
    rng = np.random.default_rng(20260819)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(20):
        layers = int(rng.integers(1, 4))
        hidden = tuple(int(rng.integers(2, 17)) for _ in range(layers))
        setup = random_setup(
            rng,
            vocab=int(rng.integers(3, 9)),
            emb=int(rng.integers(2, 9)),
            hidden=hidden,
            batch=int(rng.integers(1, 5)),
            steps=int(rng.integers(2, 11)),
            tied=False,
            dropout=bool(rng.integers(2)),
            carry=bool(rng.integers(2)),
        )
        err = fd_max_relerr(*setup, per_tensor=12, rng=rng)
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: max relative error {worst:.3e} over 20 configs in {elapsed:.1f}s")
    assert worst <= 1e-4, f"gradient mismatch: max relative error {worst}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget is 60s"


def _flat(grads):
    return np.concatenate([t.reshape(-1) for t in grads.named_tensors().values()])


def _fill(grads, values):
    for t, v in zip(grads.named_tensors().values(), values):
        t[...] = v


def test_criterion_2_clipping_invariants():
    """Idempotence, direction, norm bound, dominance on 1000 gradient sets."""
    rng = np.random.default_rng(2)
    p = init_params(6, 3, [4, 3], seed=0)
    x = np.array([[0, 1, 2]])
    y = np.array([[1, 2, 3]])
    a = backward(p, forward(p, x, y)[0])
    b = backward(p, forward(p, x, y)[0])
    names = a.group_names()

    for trial in range(1000):
        scale = 10.0 ** rng.uniform(-3, 3)
        values = [rng.normal(scale=scale, size=t.shape) for t in a.named_tensors().values()]
        caps = {n: 10.0 ** rng.uniform(-3, 1) for n in names}
        _fill(a, values)
        before = {
            n: np.concatenate([t.reshape(-1).copy() for t in a.group_arrays(n)])
            for n in names
        }

        out, pre = layerwise_clip(a, caps)
        norms = group_norms(out)
        for n in names:
            # norm bound
            assert norms[n] <= caps[n] * (1 + 1e-12), (trial, n)
            # direction preservation for every group that was actually scaled
            if pre[n] > caps[n]:
                after = np.concatenate([t.reshape(-1) for t in out.group_arrays(n)])
                cos = float(after @ before[n]) / (
                    float(np.linalg.norm(after)) * float(np.linalg.norm(before[n]))
                )
                assert abs(cos - 1.0) <= 1e-12, (trial, n, cos)

        # idempotence, bit-exact
        snapshot = _flat(out).copy()
        layerwise_clip(out, caps)
        assert np.array_equal(_flat(out), snapshot), trial

        # dominance containment: inflate one group in an identical copy
        loud = names[int(rng.integers(len(names)))]
        _fill(b, values)
        for t in b.group_arrays(loud):
            t *= 1e6
        out_b, _ = layerwise_clip(b, caps)
        _fill(a, values)
        out_a, _ = layerwise_clip(a, caps)
        for n in names:
            if n == loud:
                continue
            for ta, tb in zip(out_a.group_arrays(n), out_b.group_arrays(n)):
                assert np.array_equal(ta, tb), (trial, n)
    print("criterion 2: all four clip invariants held on 1000 gradient sets")


def test_criterion_3_equivalent_norm_formula():
    """Root-sum-square of thresholds vs an extended-precision oracle."""
    assert equivalent_global_norm({"a": 3.0, "b": 4.0}) == 5.0
    rng = np.random.default_rng(3)
    for trial in range(1000):
        k = int(rng.integers(1, 7))
        mus = 10.0 ** rng.uniform(-4, 2, size=k)
        policy = {f"g{i}": float(m) for i, m in enumerate(mus)}
        got = equivalent_global_norm(policy)
        oracle = float(np.sqrt(np.square(mus.astype(np.longdouble)).sum()))
        assert got == pytest.approx(oracle, rel=1e-12), (trial, got, oracle)
    print("criterion 3: equivalent global norm matched the oracle on 1000 policies")


def _toy_data(batch=16, window=20):
    vocab = build_vocab(read_lines(TOY / "train.txt"))
    train = batchify(vocab.encode(read_lines(TOY / "train.txt")), batch)
    valid = batchify(vocab.encode(read_lines(TOY / "valid.txt")), batch)
    return vocab, TrainData(train=train, valid=valid, window=window)


def _caps(n):
    caps = {"embedding": 5.0, "softmax": 5.0}
    caps.update({f"layer_{k}": 5.0 for k in range(1, n + 1)})
    return LayerwiseClip(caps)


def _plan3(epochs=(1, 1, 0)):
    return PhasePlan(
        [
            PhaseConfig(
                layer_count=k,
                hidden_size=24,
                epochs=epochs[k - 1],
                lr=1.0,
                clip=_caps(k),
                seed=400 + k,
            )
            for k in (1, 2, 3)
        ]
    )


def test_criterion_4_inheritance_and_resume(tmp_path):
    """Layer inheritance is bit-exact across phase transitions, and a killed
    schedule resumes into the identical next-phase initial state."""
    vocab, data = _toy_data()
    kw = dict(vocab_size=vocab.size, emb_size=24, tied=False)

    # a zero-epoch final phase exposes phase 3's untouched initial state
    full_dir = tmp_path / "full"
    full = run_schedule(_plan3(), data, out_dir=full_dir, **kw)
    best2, _ = load_checkpoint(full_dir / "phase-2-best.npz")
    start3 = full[2].params
    np.testing.assert_array_equal(start3.embedding, best2.embedding)
    for k in (0, 1):
        np.testing.assert_array_equal(start3.layers[k].w_x, best2.layers[k].w_x)
        np.testing.assert_array_equal(start3.layers[k].w_h, best2.layers[k].w_h)
        np.testing.assert_array_equal(start3.layers[k].b, best2.layers[k].b)
    np.testing.assert_array_equal(start3.softmax_w, best2.softmax_w)

    # same check across the 1 -> 2 transition
    two_dir = tmp_path / "two"
    two = run_schedule(
        PhasePlan([_plan3((1, 0, 0)).phases[0], _plan3((1, 0, 0)).phases[1]]),
        data,
        out_dir=two_dir,
        **kw,
    )
    best1, _ = load_checkpoint(two_dir / "phase-1-best.npz")
    start2 = two[1].params
    np.testing.assert_array_equal(start2.embedding, best1.embedding)
    np.testing.assert_array_equal(start2.layers[0].w_x, best1.layers[0].w_x)

    # kill-and-resume: run the 2-phase prefix, then the full plan on top
    resumed_dir = tmp_path / "resumed"
    run_schedule(PhasePlan(_plan3().phases[:2]), data, out_dir=resumed_dir, **kw)
    resumed = run_schedule(_plan3(), data, out_dir=resumed_dir, **kw)
    assert resumed[0].resumed and resumed[1].resumed
    for a, b in zip(
        full[2].params.named_tensors().values(),
        resumed[2].params.named_tensors().values(),
    ):
        np.testing.assert_array_equal(a, b)
    print("criterion 4: inheritance and kill-and-resume are bit-exact")


def _random_joint(rng, rows, cols):
    m = rng.random((rows, cols)) + 1e-3
    return JointTable(m / m.sum())


def _random_channel(rng, rows, cols):
    m = rng.random((rows, cols)) + 1e-3
    return Channel(m / m.sum(axis=1, keepdims=True))


def test_criterion_5_cross_entropy_decomposition():
    """The exact split of cross entropy into floor plus KL excess, and the
    optimality of the induced posterior."""
    rng = np.random.default_rng(5)
    for trial in range(1000):
        nx, nt, ny = (int(v) for v in rng.integers(2, 6, size=3))
        j = _random_joint(rng, nx, ny)
        chain = _random_channel(rng, nx, nt)
        q = _random_channel(rng, nt, ny).matrix
        out = ce_decomposition(j, chain, q)  # raises beyond 1e-12 internally
        assert out.cross_entropy >= out.h_y_given_x - 1e-12, trial

    j = _random_joint(rng, 5, 4)
    chain = _random_channel(rng, 5, 3)
    best = ce_decomposition(j, chain, induced_posterior(j, chain)).cross_entropy
    for trial in range(1000):
        q = _random_channel(rng, 3, 4).matrix
        other = ce_decomposition(j, chain, q).cross_entropy
        assert other >= best - 1e-12, (trial, other, best)
    print("criterion 5: decomposition identity and minimality held on 1000 trials each")


def test_criterion_6_dpi_and_theorem3():
    """Processing never increases information; equality exactly when the
    final symbols still determine p(y|x)."""
    rng = np.random.default_rng(6)
    for trial in range(1000):
        length = int(rng.integers(1, 5))
        sizes = [int(v) for v in rng.integers(2, 9, size=length + 1)]
        j = _random_joint(rng, sizes[0], int(rng.integers(2, 9)))
        chain = [_random_channel(rng, sizes[i], sizes[i + 1]) for i in range(length)]
        mis = dpi_chain_check(j, chain)  # raises on any increase beyond 1e-10
        for a, b in zip(mis, mis[1:]):
            assert b <= a + 1e-10, trial

    # invertible-deterministic chain: every gap vanishes
    j = _random_joint(rng, 5, 4)
    perm = Channel(np.eye(5)[rng.permutation(5)])
    report = theorem3_check(j, [perm, Channel.identity(5)])
    assert report.holds and all(abs(g) <= 1e-10 for g in report.gaps)

    # merging states with identical label posteriors: still lossless
    p = np.array([[0.2, 0.05], [0.4, 0.1], [0.05, 0.2]])
    j_suff = JointTable(p)
    merge = Channel(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    report = theorem3_check(j_suff, [merge])
    assert report.holds and all(abs(g) <= 1e-10 for g in report.gaps)

    # merging states with different posteriors: a strict gap must appear
    j_bad = JointTable(np.array([[0.5, 0.0], [0.0, 0.5]]))
    collapse = Channel(np.ones((2, 1)))
    report = theorem3_check(j_bad, [collapse])
    assert not report.holds
    assert max(report.gaps) > 1e-10
    print("criterion 6: DPI held on 1000 chains; equality cases behaved")


def _unigram_baseline_ppl() -> float:
    """exp of the empirical unigram entropy of the training stream, by
    direct counting."""
    vocab = build_vocab(read_lines(TOY / "train.txt"))
    ids = vocab.encode(read_lines(TOY / "train.txt"))
    counts = np.bincount(ids, minlength=vocab.size).astype(np.float64)
    probs = counts[counts > 0] / counts.sum()
    return float(np.exp(-(probs * np.log(probs)).sum()))


def _ablation_ppls(out_dir: Path) -> dict[str, tuple[float, float]]:
    rows = (out_dir / "ablation.csv").read_text().splitlines()[1:]
    out = {}
    for row in rows:
        arm, valid_ppl, test_ppl = row.split(",")
        out[arm] = (float(valid_ppl), float(test_ppl))
    return out


def test_criterion_7_gl_benefit(tmp_path, monkeypatch):
    """Growing depth phase by phase matches or beats training the deepest
    net from scratch on the bundled corpus, with a shared seed and budget."""
    monkeypatch.setenv("STACKLM_OUT_ROOT", str(tmp_path))
    t0 = time.perf_counter()
    assert main(["ablate", str(REPO / "configs" / "toy_gl2.json"), "--arms", "full,wo_gl"]) == 0
    elapsed = time.perf_counter() - t0

    ppls = _ablation_ppls(tmp_path / "runs" / "toy_gl2")
    gl_valid = ppls["full"][0]
    scratch_valid = ppls["wo_gl"][0]
    baseline = _unigram_baseline_ppl()
    print(
        f"criterion 7: GL valid ppl {gl_valid:.3f}, scratch {scratch_valid:.3f}, "
        f"unigram baseline {baseline:.2f}, {elapsed:.0f}s (seed 20)"
    )
    assert gl_valid <= scratch_valid * 1.02, (gl_valid, scratch_valid)
    assert gl_valid < baseline and scratch_valid < baseline
    assert elapsed < 900.0, f"took {elapsed:.0f}s, budget is 15 min"


def _mean_drift_layer(out_dir: Path, layer: int) -> float:
    rows = (out_dir / "drift.csv").read_text().splitlines()[1:]
    values = [float(r.split(",")[2]) for r in rows if int(r.split(",")[1]) == layer]
    assert values, f"no drift rows for layer {layer} in {out_dir}"
    return float(np.mean(values))


def test_criterion_8_covariate_shift_direction(tmp_path, monkeypatch):
    """Reports the layer-3 drift comparison between per-group and equivalent
    global clipping. Directional: the number is reported, the artifacts are
    gated."""
    monkeypatch.setenv("STACKLM_OUT_ROOT", str(tmp_path))
    assert main(["ablate", str(REPO / "configs" / "toy_gl3.json"), "--arms", "full,wo_lwgc"]) == 0

    out = tmp_path / "runs" / "toy_gl3"
    lwgc = _mean_drift_layer(out / "arm-full", 3)
    glob = _mean_drift_layer(out / "arm-wo_lwgc", 3)
    verdict = "reproduced" if lwgc <= glob else "NOT reproduced"
    print(
        f"criterion 8: layer-3 mean TV drift {lwgc:.4f} (per-group) vs "
        f"{glob:.4f} (global) -> direction {verdict} (seed 30)"
    )
    for arm in ("arm-full", "arm-wo_lwgc"):
        for name in ("drift.csv", "histograms.csv", "gradnorms.csv"):
            assert (out / arm / name).exists(), (arm, name)
    assert 0.0 <= lwgc <= 1.0 and 0.0 <= glob <= 1.0


def test_criterion_9_byte_determinism(tmp_path, monkeypatch):
    """Two executions of a bundled config produce byte-identical artifacts."""
    outputs = []
    for root in ("one", "two"):
        monkeypatch.setenv("STACKLM_OUT_ROOT", str(tmp_path / root))
        assert main(["train", str(REPO / "configs" / "toy_tiny.json")]) == 0
        outputs.append(tmp_path / root / "runs" / "toy_tiny")
    compared = 0
    for name in (
        "epochs.csv",
        "gradnorms.csv",
        "histograms.csv",
        "drift.csv",
        "schedule.json",
        "vocab.tsv",
        "phase-1-best.npz",
    ):
        a = (outputs[0] / name).read_bytes()
        b = (outputs[1] / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"
        compared += 1
    print(f"criterion 9: {compared} artifacts byte-identical across reruns")
