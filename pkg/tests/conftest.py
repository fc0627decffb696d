import numpy as np
import pytest

from stacklm.netcore import CarryState, KeepProbs, backward, forward, init_params, sample_masks


def fd_max_relerr(
    params,
    inputs,
    targets,
    carry=None,
    masks=None,
    *,
    eps=1e-4,
    per_tensor=None,
    rng=None,
):
    """Max relative error of backward() vs central finite differences.

    Perturbs every component, or `per_tensor` seeded-random components of each
    tensor when given. The relative error uses a 1e-6 floor so components with
    true gradient ~0 compare on an absolute scale.
    """
    trace, _ = forward(params, inputs, targets, carry, masks)
    grads = backward(params, trace)
    g_named = grads.named_tensors()
    worst = 0.0
    for name, tensor in params.named_tensors().items():
        g = g_named[name].reshape(-1)
        flat = tensor.reshape(-1)
        if per_tensor is not None and flat.size > per_tensor:
            idxs = rng.choice(flat.size, size=per_tensor, replace=False)
        else:
            idxs = range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            _, lp = forward(params, inputs, targets, carry, masks)
            flat[i] = orig - eps
            _, lm = forward(params, inputs, targets, carry, masks)
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
    return worst


def random_setup(rng, *, vocab=9, emb=5, hidden=(6, 4), batch=3, steps=5, tied=False,
                 dropout=False, carry=True):
    """A small random model plus one training window, for gradient tests."""
    params = init_params(vocab, emb, list(hidden), tied=tied, init_scale=0.2,
                         seed=rng, dtype=np.float64)
    inputs = rng.integers(0, vocab, size=(batch, steps))
    targets = rng.integers(0, vocab, size=(batch, steps))
    state = None
    if carry:
        state = CarryState(
            [rng.normal(0.0, 0.5, (batch, h)) for h in params.hidden_sizes],
            [rng.normal(0.0, 0.5, (batch, h)) for h in params.hidden_sizes],
        )
    masks = None
    if dropout:
        masks = sample_masks(params, batch, KeepProbs(0.9, 0.8, 0.85, 0.9), rng)
    return params, inputs, targets, state, masks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
