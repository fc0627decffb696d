import math

import numpy as np
import pytest

from stacklm.corpus import BatchedStream
from stacklm.netcore import (
    CarryState,
    DropoutMasks,
    GradientSet,
    KeepProbs,
    LstmLayerParams,
    NetworkParams,
    NumericOverflowError,
    ParamAverage,
    backward,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    sample_masks,
    save_checkpoint,
    sgd_step,
)

from conftest import fd_max_relerr, random_setup


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestInitParams:
    def test_same_seed_bit_identical(self):
        a = init_params(7, 4, [5, 3], seed=42)
        b = init_params(7, 4, [5, 3], seed=42)
        for t1, t2 in zip(a.named_tensors().values(), b.named_tensors().values()):
            np.testing.assert_array_equal(t1, t2)

    def test_zero_scale_means_zero_weights_forget_bias_one(self):
        p = init_params(5, 3, [4], init_scale=0.0, seed=0)
        assert not p.embedding.any()
        layer = p.layers[0]
        assert not layer.w_x.any() and not layer.w_h.any()
        assert layer.b[4:8].tolist() == [1.0] * 4
        assert not layer.b[:4].any() and not layer.b[8:].any()

    def test_weight_mean_near_zero(self):
        p = init_params(1250, 8, [8], seed=1)
        draws = p.embedding.reshape(-1)
        assert draws.size >= 10_000
        assert abs(draws.mean()) < 0.02

    def test_tying_mismatch_errors(self):
        with pytest.raises(ValueError, match="tying size mismatch"):
            init_params(5, 4, [6], tied=True)

    def test_tying_drops_exactly_one_tensor(self):
        tied = init_params(5, 4, [4], tied=True)
        untied = init_params(5, 4, [4], tied=False)
        assert len(tied.named_tensors()) == len(untied.named_tensors()) - 1
        assert tied.output_weight() is tied.embedding


class TestSampleMasks:
    def test_keep_one_is_all_ones(self, rng):
        p = init_params(6, 3, [4], seed=rng)
        m = sample_masks(p, 2, KeepProbs(), rng)
        assert (m.emb_rows == 1.0).all()
        assert all((x == 1.0).all() for x in m.layer_input + m.recurrent)
        assert (m.output == 1.0).all()

    def test_keep_half_statistics(self):
        p = init_params(10_000, 4, [4], seed=0)
        rng = np.random.default_rng(9)
        m = sample_masks(p, 1, KeepProbs(emb_rows=0.5), rng)
        zeros = (m.emb_rows == 0.0).mean()
        assert abs(zeros - 0.5) < 0.02
        assert (m.emb_rows[m.emb_rows != 0] == 2.0).all()

    def test_same_seed_identical(self):
        p = init_params(8, 3, [4], seed=0)
        a = sample_masks(p, 3, KeepProbs(0.9, 0.8, 0.7, 0.6), np.random.default_rng(5))
        b = sample_masks(p, 3, KeepProbs(0.9, 0.8, 0.7, 0.6), np.random.default_rng(5))
        np.testing.assert_array_equal(a.emb_rows, b.emb_rows)
        np.testing.assert_array_equal(a.output, b.output)
        for x, y in zip(a.layer_input + a.recurrent, b.layer_input + b.recurrent):
            np.testing.assert_array_equal(x, y)

    def test_zero_keep_prob_errors(self, rng):
        p = init_params(6, 3, [4], seed=rng)
        with pytest.raises(ValueError, match="keep probability"):
            sample_masks(p, 2, KeepProbs(recurrent=0.0), rng)


class TestForward:
    def test_zero_params_uniform_loss(self, rng):
        vocab = 11
        p = init_params(vocab, 4, [5], init_scale=0.0, seed=0)
        x = rng.integers(0, vocab, size=(3, 6))
        y = rng.integers(0, vocab, size=(3, 6))
        trace, loss = forward(p, x, y)
        assert loss == pytest.approx(math.log(vocab), rel=1e-12)
        assert np.ptp(trace.logits) == 0.0

    def test_matches_hand_computed_cell(self):
        # 1 layer, h=2, T=1, B=1: every gate evaluated scalar by scalar.
        p = init_params(3, 2, [2], init_scale=0.0, seed=0)
        p.embedding[:] = [[0.1, -0.2], [0.3, 0.05], [-0.4, 0.2]]
        p.layers[0].w_x[:] = np.arange(16).reshape(8, 2) * 0.05 - 0.3
        p.layers[0].w_h[:] = np.arange(16).reshape(8, 2) * -0.04 + 0.2
        p.layers[0].b[:] = np.linspace(-0.5, 0.5, 8)
        p.softmax_w[:] = np.arange(6).reshape(3, 2) * 0.1 - 0.25
        p.softmax_b[:] = [0.05, -0.1, 0.2]
        h_prev = np.array([0.3, -0.6])
        c_prev = np.array([-0.2, 0.4])
        carry = CarryState([h_prev[None, :].copy()], [c_prev[None, :].copy()])

        x_vec = p.embedding[1]
        a = p.layers[0].w_x @ x_vec + p.layers[0].w_h @ h_prev + p.layers[0].b
        i = [_sig(a[0]), _sig(a[1])]
        f = [_sig(a[2]), _sig(a[3])]
        g = [math.tanh(a[4]), math.tanh(a[5])]
        o = [_sig(a[6]), _sig(a[7])]
        c = [f[k] * c_prev[k] + i[k] * g[k] for k in range(2)]
        h = [o[k] * math.tanh(c[k]) for k in range(2)]
        logits = [p.softmax_w[v] @ np.array(h) + p.softmax_b[v] for v in range(3)]
        z = sum(math.exp(v) for v in logits)
        expected_loss = -(logits[2] - math.log(z))

        trace, loss = forward(p, np.array([[1]]), np.array([[2]]), carry)
        assert loss == pytest.approx(expected_loss, rel=1e-12, abs=1e-14)
        np.testing.assert_allclose(trace.hidden[0][0, 0], h, rtol=1e-12)
        np.testing.assert_allclose(trace.cell[0][0, 0], c, rtol=1e-12)

    def test_all_ones_masks_match_no_masks(self, rng):
        p, x, y, carry, _ = random_setup(rng)
        _, loss_none = forward(p, x, y, carry)
        _, loss_ones = forward(p, x, y, carry, DropoutMasks.ones(p, x.shape[0]))
        assert loss_none == loss_ones

    def test_layer_composition(self, rng):
        """The 2-layer net's second state sequence equals layer 2 run by hand
        over the stored first-layer states."""
        p, x, y, carry, _ = random_setup(rng, hidden=(5, 4), batch=2, steps=6)
        trace, _ = forward(p, x, y, carry)

        layer = p.layers[1]
        h_size = layer.hidden_size
        h_prev, c_prev = carry.h[1].copy(), carry.c[1].copy()
        for t in range(x.shape[1]):
            a = trace.hidden[0][:, t] @ layer.w_x.T + h_prev @ layer.w_h.T + layer.b
            i = 1 / (1 + np.exp(-a[:, :h_size]))
            f = 1 / (1 + np.exp(-a[:, h_size : 2 * h_size]))
            g = np.tanh(a[:, 2 * h_size : 3 * h_size])
            o = 1 / (1 + np.exp(-a[:, 3 * h_size :]))
            c_prev = f * c_prev + i * g
            h_prev = o * np.tanh(c_prev)
            np.testing.assert_allclose(trace.hidden[1][:, t], h_prev, rtol=1e-12)

    def test_prefix_network_shares_first_layer_states(self, rng):
        p, x, y, carry, _ = random_setup(rng, hidden=(5, 4), batch=2, steps=6)
        prefix = NetworkParams(
            p.embedding.copy(), [p.layers[0].copy()],
            np.zeros((p.vocab_size, 5)), np.zeros(p.vocab_size), False,
        )
        sub_carry = CarryState([carry.h[0].copy()], [carry.c[0].copy()])
        full, _ = forward(p, x, y, carry)
        part, _ = forward(prefix, x, y, sub_carry)
        np.testing.assert_array_equal(full.hidden[0], part.hidden[0])

    def test_nan_weight_reports_layer_and_timestep(self, rng):
        p, x, y, carry, _ = random_setup(rng)
        p.layers[0].w_x[0, 0] = np.nan
        with pytest.raises(NumericOverflowError, match="numeric overflow") as exc:
            forward(p, x, y, carry)
        assert exc.value.layer == 1
        assert exc.value.timestep == 0

    def test_out_of_range_ids_error(self, rng):
        p, x, y, carry, _ = random_setup(rng, vocab=9)
        x[0, 0] = 9
        with pytest.raises(ValueError, match="out of vocabulary"):
            forward(p, x, y, carry)

    def test_determinism_of_loss_sequence(self, rng):
        losses = []
        for _ in range(2):
            r = np.random.default_rng(77)
            p, x, y, carry, masks = random_setup(r, dropout=True)
            run = [forward(p, x, y, carry, masks)[1] for _ in range(3)]
            losses.append(run)
        assert losses[0] == losses[1]


class TestBackward:
    def test_fd_every_component_reference_shape(self, rng):
        # 2 layers, h=8, T=10, B=2: the full component-by-component check.
        p, x, y, carry, masks = random_setup(
            rng, vocab=7, emb=6, hidden=(8, 8), batch=2, steps=10, dropout=True
        )
        assert fd_max_relerr(p, x, y, carry, masks) <= 1e-4

    def test_fd_tied_with_dropout(self, rng):
        p, x, y, carry, masks = random_setup(
            rng, vocab=8, emb=5, hidden=(6, 5), batch=2, steps=6, tied=True, dropout=True
        )
        assert fd_max_relerr(p, x, y, carry, masks) <= 1e-4

    def test_one_token_vocab_zero_gradient(self):
        p = init_params(1, 3, [4], seed=0)
        x = np.zeros((2, 5), dtype=np.int64)
        trace, loss = forward(p, x, x)
        assert loss == 0.0
        grads = backward(p, trace)
        for t in grads.named_tensors().values():
            assert not t.any()

    def test_tied_gradient_is_sum_of_untied_parts(self, rng):
        tied, x, y, carry, _ = random_setup(
            rng, vocab=8, emb=5, hidden=(6, 5), batch=2, steps=6, tied=True
        )
        untied = NetworkParams(
            tied.embedding.copy(),
            [l.copy() for l in tied.layers],
            tied.embedding.copy(),  # same values, separate storage
            tied.softmax_b.copy(),
            False,
        )
        g_tied = backward(tied, forward(tied, x, y, carry)[0])
        g_untied = backward(untied, forward(untied, x, y, carry)[0])
        np.testing.assert_allclose(
            g_tied.embedding, g_untied.embedding + g_untied.softmax_w, rtol=1e-12, atol=1e-15
        )

    def test_trace_mismatch_errors(self, rng):
        p, x, y, carry, _ = random_setup(rng, hidden=(6, 4))
        other, *_ = random_setup(np.random.default_rng(5), hidden=(6,))
        trace, _ = forward(p, x, y, carry)
        with pytest.raises(ValueError, match="trace"):
            backward(other, trace)

    def test_no_gradient_into_carry(self, rng):
        """Perturbing the incoming carry changes the loss, but backward must
        treat it as constant: gradients stay the exact window gradients."""
        p, x, y, carry, _ = random_setup(rng)
        assert fd_max_relerr(p, x, y, carry, None) <= 1e-4


class TestSgdStep:
    def test_zero_lr_keeps_params(self, rng):
        p, x, y, carry, _ = random_setup(rng)
        before = {k: v.copy() for k, v in p.named_tensors().items()}
        grads = backward(p, forward(p, x, y, carry)[0])
        sgd_step(p, grads, 0.0)
        for k, v in p.named_tensors().items():
            np.testing.assert_array_equal(v, before[k])

    def test_scalar_arithmetic(self):
        p = init_params(1, 1, [1], init_scale=0.0, seed=0)
        p.embedding[:] = 1.0
        g = GradientSet(
            np.full_like(p.embedding, 2.0),
            [LstmLayerParams(np.zeros_like(p.layers[0].w_x),
                             np.zeros_like(p.layers[0].w_h),
                             np.zeros_like(p.layers[0].b))],
            np.zeros_like(p.softmax_w),
            np.zeros_like(p.softmax_b),
            False,
        )
        sgd_step(p, g, 0.1)
        assert p.embedding[0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_running_average(self):
        avg = ParamAverage()
        p = init_params(2, 2, [2], init_scale=0.0, seed=0)
        for value in (1.0, 2.0, 3.0):
            p.embedding[:] = value
            avg.update(p)
        assert np.allclose(avg.averaged().embedding, 2.0)

    def test_non_finite_grads_error(self, rng):
        p, x, y, carry, _ = random_setup(rng)
        grads = backward(p, forward(p, x, y, carry)[0])
        grads.embedding[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite gradient"):
            sgd_step(p, grads, 0.1)

    def test_negative_lr_errors(self, rng):
        p, x, y, carry, _ = random_setup(rng)
        grads = backward(p, forward(p, x, y, carry)[0])
        with pytest.raises(ValueError, match="learning rate"):
            sgd_step(p, grads, -0.1)


def _saturated_cycle_predictor(vocab: int) -> NetworkParams:
    """A 1-layer net that predicts token (x+1) % vocab with probability -> 1.

    Saturated gates make h = tanh(1) * onehot(x) exactly; a scaled permutation
    softmax then puts all mass on the successor token.
    """
    kappa = 1000.0
    p = init_params(vocab, vocab, [vocab], init_scale=0.0, seed=0)
    p.embedding[:] = np.eye(vocab)
    layer = p.layers[0]
    layer.w_x[:vocab] = kappa * np.eye(vocab)          # input gate ~ 1 on the hot row
    layer.b[:vocab] = -kappa / 2                       # and ~ 0 elsewhere
    layer.b[vocab : 2 * vocab] = -kappa                # forget gate ~ 0: no memory
    layer.w_x[2 * vocab : 3 * vocab] = kappa * np.eye(vocab)  # candidate ~ tanh(kappa) on hot row
    layer.b[3 * vocab :] = kappa                       # output gate ~ 1
    shift = np.roll(np.eye(vocab), 1, axis=0)          # row v+1 hot at column v
    p.softmax_w[:] = (kappa / math.tanh(1.0)) * shift
    return p


class TestEvaluate:
    def test_uniform_model_gives_vocab_perplexity(self, rng):
        vocab = 13
        p = init_params(vocab, 4, [5], init_scale=0.0, seed=0)
        stream = BatchedStream(rng.integers(0, vocab, size=(3, 40)))
        assert evaluate(p, stream, 7) == pytest.approx(vocab, rel=1e-12)

    def test_perfect_predictor_perplexity_one(self):
        vocab = 5
        p = _saturated_cycle_predictor(vocab)
        cycle = np.tile(np.arange(vocab), 8)
        stream = BatchedStream(cycle[None, :])
        assert evaluate(p, stream, 6) == pytest.approx(1.0, abs=1e-9)

    def test_unigram_oracle(self, rng):
        vocab = 7
        tokens = rng.integers(0, vocab, size=(2, 60))
        stream = BatchedStream(tokens)
        targets = tokens[:, 1:].reshape(-1)
        counts = np.bincount(targets, minlength=vocab).astype(float)
        probs = counts / counts.sum()
        entropy = -(probs[probs > 0] * np.log(probs[probs > 0])).sum()

        p = init_params(vocab, 4, [5], init_scale=0.0, seed=0)
        with np.errstate(divide="ignore"):
            p.softmax_b[:] = np.where(probs > 0, np.log(probs), -1e9)
        assert evaluate(p, stream, 9) == pytest.approx(math.exp(entropy), rel=1e-9)

    def test_window_length_invariance(self, rng):
        p, *_ = random_setup(rng, vocab=9)
        stream = BatchedStream(rng.integers(0, 9, size=(2, 63)))
        a = evaluate(p, stream, 5)
        b = evaluate(p, stream, 10)
        assert a == pytest.approx(b, rel=1e-9)

    def test_empty_stream_errors(self):
        p = init_params(3, 2, [2], seed=0)
        with pytest.raises(ValueError, match="empty stream"):
            evaluate(p, BatchedStream(np.zeros((2, 1), dtype=np.int64)), 4)


class TestCheckpoints:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        p, *_ = random_setup(rng, tied=False)
        path = tmp_path / "model.npz"
        save_checkpoint(path, p, phase_index=2, seed=11, extra={"note": "x"})
        q, meta = load_checkpoint(path)
        assert meta["phase_index"] == 2
        assert meta["seed"] == 11
        assert meta["extra"] == {"note": "x"}
        assert q.tied == p.tied
        for a, b in zip(p.named_tensors().values(), q.named_tensors().values()):
            np.testing.assert_array_equal(a, b)

    def test_tied_roundtrip_preserves_tie(self, tmp_path, rng):
        p, *_ = random_setup(rng, vocab=8, emb=4, hidden=(6, 4), tied=True)
        path = tmp_path / "tied.npz"
        save_checkpoint(path, p)
        q, _ = load_checkpoint(path)
        assert q.tied
        assert q.output_weight() is q.embedding

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bogus.npz"
        np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
        with pytest.raises(ValueError, match="not a"):
            load_checkpoint(path)
