"""Stacked-LSTM language model: parameters, forward pass, exact truncated BPTT,
variational dropout, optional weight tying, and a plain SGD step with an
optional tail-averaging switch.

All math is plain numpy. The default dtype is float64 so gradients can be
checked against finite differences; float32 is allowed for training runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .corpus import BatchedStream, bptt_windows

__all__ = [
    "NumericOverflowError",
    "LstmLayerParams",
    "NetworkParams",
    "GradientSet",
    "DropoutMasks",
    "KeepProbs",
    "CarryState",
    "ForwardTrace",
    "ParamAverage",
    "init_params",
    "sample_masks",
    "forward",
    "backward",
    "sgd_step",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]

# Fused gate blocks are stacked in this row order inside every 4h-tall tensor.
GATE_ORDER = ("input", "forget", "cell", "output")

CHECKPOINT_FORMAT = "stacklm-checkpoint/1"


class NumericOverflowError(RuntimeError):
    """A non-finite activation appeared during the forward pass."""

    def __init__(self, layer: int | str, timestep: int | None):
        self.layer = layer
        self.timestep = timestep
        where = f"layer {layer}" if timestep is None else f"layer {layer}, timestep {timestep}"
        super().__init__(f"numeric overflow at {where}")


def _as_rng(seed: int | np.random.SeedSequence | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class LstmLayerParams:
    """One LSTM layer's fused tensors (also reused as a gradient container)."""

    w_x: np.ndarray  # (4h, d_in)
    w_h: np.ndarray  # (4h, h)
    b: np.ndarray    # (4h,)

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    def copy(self) -> "LstmLayerParams":
        return LstmLayerParams(self.w_x.copy(), self.w_h.copy(), self.b.copy())


@dataclass
class NetworkParams:
    """Embedding, LSTM layer stack, and softmax head (optionally tied)."""

    embedding: np.ndarray              # (V, d_emb)
    layers: list[LstmLayerParams]
    softmax_w: np.ndarray | None       # (V, h_last); None when tied to the embedding
    softmax_b: np.ndarray              # (V,)
    tied: bool

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def emb_size(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_sizes(self) -> list[int]:
        return [layer.hidden_size for layer in self.layers]

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def output_weight(self) -> np.ndarray:
        return self.embedding if self.tied else self.softmax_w  # type: ignore[return-value]

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Stable name->tensor view; the tied softmax weight is not repeated."""
        out: dict[str, np.ndarray] = {"embedding": self.embedding}
        for k, layer in enumerate(self.layers, 1):
            out[f"layer_{k}.w_x"] = layer.w_x
            out[f"layer_{k}.w_h"] = layer.w_h
            out[f"layer_{k}.b"] = layer.b
        if not self.tied:
            out["softmax.w"] = self.softmax_w  # type: ignore[assignment]
        out["softmax.b"] = self.softmax_b
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.embedding.copy(),
            [layer.copy() for layer in self.layers],
            None if self.softmax_w is None else self.softmax_w.copy(),
            self.softmax_b.copy(),
            self.tied,
        )

    def check_finite(self) -> None:
        for name, t in self.named_tensors().items():
            if not np.isfinite(t).all():
                raise NumericOverflowError(name, None)


@dataclass
class GradientSet:
    """Gradients mirroring NetworkParams, partitioned into named groups.

    Groups are "embedding", "layer_k" for k=1..l, and "softmax". With tied
    weights the softmax-weight gradient is accumulated into the embedding
    tensor, so the softmax group holds only the bias.
    """

    embedding: np.ndarray
    layers: list[LstmLayerParams]
    softmax_w: np.ndarray | None
    softmax_b: np.ndarray
    tied: bool

    def group_names(self) -> list[str]:
        return ["embedding"] + [f"layer_{k}" for k in range(1, len(self.layers) + 1)] + ["softmax"]

    def group_arrays(self, name: str) -> list[np.ndarray]:
        if name == "embedding":
            return [self.embedding]
        if name == "softmax":
            arrs = [] if self.softmax_w is None else [self.softmax_w]
            return arrs + [self.softmax_b]
        if name.startswith("layer_"):
            k = int(name.split("_", 1)[1])
            if 1 <= k <= len(self.layers):
                layer = self.layers[k - 1]
                return [layer.w_x, layer.w_h, layer.b]
        raise KeyError(f"unknown gradient group {name!r}")

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"embedding": self.embedding}
        for k, layer in enumerate(self.layers, 1):
            out[f"layer_{k}.w_x"] = layer.w_x
            out[f"layer_{k}.w_h"] = layer.w_h
            out[f"layer_{k}.b"] = layer.b
        if not self.tied:
            out["softmax.w"] = self.softmax_w  # type: ignore[assignment]
        out["softmax.b"] = self.softmax_b
        return out

    def copy(self) -> "GradientSet":
        return GradientSet(
            self.embedding.copy(),
            [layer.copy() for layer in self.layers],
            None if self.softmax_w is None else self.softmax_w.copy(),
            self.softmax_b.copy(),
            self.tied,
        )

    def check_finite(self) -> None:
        for name, t in self.named_tensors().items():
            if not np.isfinite(t).all():
                raise ValueError(f"non-finite gradient in {name}")


def init_params(
    vocab_size: int,
    emb_size: int,
    hidden_sizes: Sequence[int],
    *,
    tied: bool = False,
    init_scale: float = 0.1,
    seed: int | np.random.SeedSequence | np.random.Generator = 0,
    dtype: np.dtype | type = np.float64,
) -> NetworkParams:
    """Uniform(-init_scale, init_scale) weights, zero biases, forget bias 1.

    Tensor draw order is fixed (embedding, layers in order, softmax) so a seed
    fully determines the result.
    """
    if vocab_size < 1 or emb_size < 1 or not hidden_sizes:
        raise ValueError("sizes must be positive and at least one layer is required")
    if init_scale < 0:
        raise ValueError("init_scale must be >= 0")
    if tied and emb_size != hidden_sizes[-1]:
        raise ValueError("tying size mismatch")
    rng = _as_rng(seed)
    dtype = np.dtype(dtype)

    def uniform(shape: tuple[int, ...]) -> np.ndarray:
        return rng.uniform(-init_scale, init_scale, size=shape).astype(dtype)

    embedding = uniform((vocab_size, emb_size))
    layers: list[LstmLayerParams] = []
    d_in = emb_size
    for h in hidden_sizes:
        b = np.zeros(4 * h, dtype=dtype)
        b[h : 2 * h] = 1.0  # forget-gate block
        layers.append(LstmLayerParams(uniform((4 * h, d_in)), uniform((4 * h, h)), b))
        d_in = h
    softmax_w = None if tied else uniform((vocab_size, hidden_sizes[-1]))
    softmax_b = np.zeros(vocab_size, dtype=dtype)
    return NetworkParams(embedding, layers, softmax_w, softmax_b, tied)


@dataclass(frozen=True)
class KeepProbs:
    """Keep probabilities per dropout site; 1.0 disables a site."""

    emb_rows: float = 1.0
    layer_input: float = 1.0
    recurrent: float = 1.0
    output: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {
            "emb_rows": self.emb_rows,
            "layer_input": self.layer_input,
            "recurrent": self.recurrent,
            "output": self.output,
        }


@dataclass
class DropoutMasks:
    """Variational masks, fixed for all timesteps of one window.

    Entries are 0 or 1/keep_prob. The embedding mask is per vocabulary row and
    is applied at lookup only (a tied softmax keeps the unmasked matrix).
    """

    emb_rows: np.ndarray            # (V,)
    layer_input: list[np.ndarray]   # per layer, (B, d_in)
    recurrent: list[np.ndarray]     # per layer, (B, h)
    output: np.ndarray              # (B, h_last)

    @classmethod
    def ones(cls, params: NetworkParams, batch_size: int) -> "DropoutMasks":
        dtype = params.dtype
        return cls(
            np.ones(params.vocab_size, dtype=dtype),
            [np.ones((batch_size, layer.input_size), dtype=dtype) for layer in params.layers],
            [np.ones((batch_size, layer.hidden_size), dtype=dtype) for layer in params.layers],
            np.ones((batch_size, params.hidden_sizes[-1]), dtype=dtype),
        )


def sample_masks(
    params: NetworkParams,
    batch_size: int,
    keep: KeepProbs,
    rng: np.random.Generator,
) -> DropoutMasks:
    """Draw one set of variational masks; each entry has expectation 1."""
    for site, p in keep.as_dict().items():
        if not (0.0 < p <= 1.0):
            raise ValueError(f"keep probability for {site} must be in (0, 1], got {p}")
    dtype = params.dtype

    def draw(shape: tuple[int, ...], p: float) -> np.ndarray:
        return ((rng.random(shape) < p) / p).astype(dtype)

    return DropoutMasks(
        draw((params.vocab_size,), keep.emb_rows),
        [draw((batch_size, layer.input_size), keep.layer_input) for layer in params.layers],
        [draw((batch_size, layer.hidden_size), keep.recurrent) for layer in params.layers],
        draw((batch_size, params.hidden_sizes[-1]), keep.output),
    )


@dataclass
class CarryState:
    """Per-layer hidden and cell state carried between consecutive windows."""

    h: list[np.ndarray]  # per layer, (B, h)
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, params: NetworkParams, batch_size: int) -> "CarryState":
        dtype = params.dtype
        return cls(
            [np.zeros((batch_size, h), dtype=dtype) for h in params.hidden_sizes],
            [np.zeros((batch_size, h), dtype=dtype) for h in params.hidden_sizes],
        )

    def copy(self) -> "CarryState":
        return CarryState([a.copy() for a in self.h], [a.copy() for a in self.c])


@dataclass
class ForwardTrace:
    """Everything the backward pass needs, cached from one forward window."""

    inputs: np.ndarray                 # (B, T) ids
    targets: np.ndarray                # (B, T) ids
    carry_in: CarryState
    carry_out: CarryState
    masks: DropoutMasks
    x_tilde: list[np.ndarray]          # per layer, (B, T, d_in): masked layer inputs
    preact: list[np.ndarray]           # per layer, (B, T, 4h)
    gate_i: list[np.ndarray]           # per layer, (B, T, h)
    gate_f: list[np.ndarray]
    gate_g: list[np.ndarray]
    gate_o: list[np.ndarray]
    cell: list[np.ndarray]             # per layer, (B, T, h)
    hidden: list[np.ndarray]           # per layer, (B, T, h)
    logits: np.ndarray                 # (B, T, V)
    nll_sum: float
    n_positions: int


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign for stability at large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(
    params: NetworkParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    carry: CarryState | None = None,
    masks: DropoutMasks | None = None,
) -> tuple[ForwardTrace, float]:
    """Run the network over one window and return the trace and mean NLL.

    The loss is the mean over all B*T positions of the negative natural-log
    softmax probability of the target id.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.ndim != 2 or inputs.shape != targets.shape:
        raise ValueError("inputs and targets must be matching (B, T) matrices")
    if inputs.size == 0:
        raise ValueError("empty window")
    vocab = params.vocab_size
    if inputs.min() < 0 or inputs.max() >= vocab or targets.min() < 0 or targets.max() >= vocab:
        raise ValueError("token id out of vocabulary range")
    B, T = inputs.shape
    dtype = params.dtype
    if masks is None:
        masks = DropoutMasks.ones(params, B)
    if carry is None:
        carry = CarryState.zeros(params, B)
    for k, layer in enumerate(params.layers):
        if carry.h[k].shape != (B, layer.hidden_size) or carry.c[k].shape != (B, layer.hidden_size):
            raise ValueError(f"carry state shape mismatch at layer {k + 1}")
    carry_in = carry.copy()

    row_scale = masks.emb_rows[inputs]                       # (B, T)
    x = params.embedding[inputs] * row_scale[:, :, None]     # (B, T, d_emb)

    x_tilde: list[np.ndarray] = []
    preact: list[np.ndarray] = []
    gate_i: list[np.ndarray] = []
    gate_f: list[np.ndarray] = []
    gate_g: list[np.ndarray] = []
    gate_o: list[np.ndarray] = []
    cell: list[np.ndarray] = []
    hidden: list[np.ndarray] = []
    out_h: list[np.ndarray] = []
    out_c: list[np.ndarray] = []

    for k, layer in enumerate(params.layers):
        h_size = layer.hidden_size
        m_in = masks.layer_input[k]
        m_rec = masks.recurrent[k]
        xt = x * m_in[:, None, :]
        a_seq = np.empty((B, T, 4 * h_size), dtype=dtype)
        i_seq = np.empty((B, T, h_size), dtype=dtype)
        f_seq = np.empty_like(i_seq)
        g_seq = np.empty_like(i_seq)
        o_seq = np.empty_like(i_seq)
        c_seq = np.empty_like(i_seq)
        h_seq = np.empty_like(i_seq)

        xproj = xt @ layer.w_x.T + layer.b                   # (B, T, 4h)
        w_h_t = layer.w_h.T
        h_prev = carry.h[k]
        c_prev = carry.c[k]
        for t in range(T):
            a = xproj[:, t] + (h_prev * m_rec) @ w_h_t
            i = _sigmoid(a[:, :h_size])
            f = _sigmoid(a[:, h_size : 2 * h_size])
            g = np.tanh(a[:, 2 * h_size : 3 * h_size])
            o = _sigmoid(a[:, 3 * h_size :])
            c = f * c_prev + i * g
            h = o * np.tanh(c)
            if not (np.isfinite(c).all() and np.isfinite(h).all()):
                raise NumericOverflowError(k + 1, t)
            a_seq[:, t] = a
            i_seq[:, t] = i
            f_seq[:, t] = f
            g_seq[:, t] = g
            o_seq[:, t] = o
            c_seq[:, t] = c
            h_seq[:, t] = h
            h_prev = h
            c_prev = c
        x_tilde.append(xt)
        preact.append(a_seq)
        gate_i.append(i_seq)
        gate_f.append(f_seq)
        gate_g.append(g_seq)
        gate_o.append(o_seq)
        cell.append(c_seq)
        hidden.append(h_seq)
        out_h.append(h_prev.copy())
        out_c.append(c_prev.copy())
        x = h_seq

    out = x * masks.output[:, None, :]
    logits = out @ params.output_weight().T + params.softmax_b
    if not np.isfinite(logits).all():
        raise NumericOverflowError("softmax", None)

    m = logits.max(axis=2, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=2))
    tgt_logit = np.take_along_axis(logits, targets[:, :, None], axis=2)[..., 0]
    nll_sum = float((lse - tgt_logit).sum())
    loss = nll_sum / (B * T)

    trace = ForwardTrace(
        inputs=inputs,
        targets=targets,
        carry_in=carry_in,
        carry_out=CarryState(out_h, out_c),
        masks=masks,
        x_tilde=x_tilde,
        preact=preact,
        gate_i=gate_i,
        gate_f=gate_f,
        gate_g=gate_g,
        gate_o=gate_o,
        cell=cell,
        hidden=hidden,
        logits=logits,
        nll_sum=nll_sum,
        n_positions=B * T,
    )
    return trace, loss


def backward(params: NetworkParams, trace: ForwardTrace, targets: np.ndarray | None = None) -> GradientSet:
    """Exact gradient of the window loss w.r.t. every parameter.

    Gradients do not flow into the incoming carry state: the window edge is
    the truncation boundary.
    """
    tg = trace.targets if targets is None else np.asarray(targets)
    if tg.shape != trace.inputs.shape:
        raise ValueError("targets do not match the traced window")
    L = params.layer_count
    if L != len(trace.hidden) or any(
        trace.hidden[k].shape[2] != params.layers[k].hidden_size for k in range(L)
    ):
        raise ValueError("trace does not match parameters")
    B, T = tg.shape
    N = B * T
    masks = trace.masks

    logits = trace.logits
    m = logits.max(axis=2, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=2, keepdims=True)
    dlogits = probs.reshape(N, -1)
    dlogits[np.arange(N), tg.reshape(-1)] -= 1.0
    dlogits /= N

    out = (trace.hidden[L - 1] * masks.output[:, None, :]).reshape(N, -1)
    d_wout = dlogits.T @ out                                   # (V, h_last)
    d_sb = dlogits.sum(axis=0)                                 # (V,)
    d_above = (dlogits @ params.output_weight()).reshape(B, T, -1) * masks.output[:, None, :]

    layer_grads: list[LstmLayerParams | None] = [None] * L
    for k in range(L - 1, -1, -1):
        layer = params.layers[k]
        h_size = layer.hidden_size
        i_seq = trace.gate_i[k]
        f_seq = trace.gate_f[k]
        g_seq = trace.gate_g[k]
        o_seq = trace.gate_o[k]
        c_seq = trace.cell[k]
        h_seq = trace.hidden[k]
        m_rec = masks.recurrent[k]
        m_in = masks.layer_input[k]
        tanh_c = np.tanh(c_seq)

        da_seq = np.empty((B, T, 4 * h_size), dtype=params.dtype)
        dh_rec = np.zeros((B, h_size), dtype=params.dtype)
        dc_rec = np.zeros((B, h_size), dtype=params.dtype)
        for t in range(T - 1, -1, -1):
            dh = d_above[:, t] + dh_rec
            tch = tanh_c[:, t]
            o = o_seq[:, t]
            dc = dh * o * (1.0 - tch * tch) + dc_rec
            i = i_seq[:, t]
            f = f_seq[:, t]
            g = g_seq[:, t]
            c_prev = c_seq[:, t - 1] if t > 0 else trace.carry_in.c[k]
            da = da_seq[:, t]
            da[:, :h_size] = dc * g * i * (1.0 - i)
            da[:, h_size : 2 * h_size] = dc * c_prev * f * (1.0 - f)
            da[:, 2 * h_size : 3 * h_size] = dc * i * (1.0 - g * g)
            da[:, 3 * h_size :] = dh * tch * o * (1.0 - o)
            dh_rec = (da @ layer.w_h) * m_rec
            dc_rec = dc * f

        da2 = da_seq.reshape(N, 4 * h_size)
        d_wx = da2.T @ trace.x_tilde[k].reshape(N, -1)
        h_prev_seq = np.concatenate([trace.carry_in.h[k][:, None, :], h_seq[:, :-1]], axis=1)
        h_prev_seq = h_prev_seq * m_rec[:, None, :]
        d_wh = da2.T @ h_prev_seq.reshape(N, h_size)
        d_b = da2.sum(axis=0)
        layer_grads[k] = LstmLayerParams(d_wx, d_wh, d_b)
        d_above = (da2 @ layer.w_x).reshape(B, T, -1) * m_in[:, None, :]

    row_scale = masks.emb_rows[trace.inputs]
    de = d_above * row_scale[:, :, None]
    d_emb = np.zeros_like(params.embedding)
    np.add.at(d_emb, trace.inputs.reshape(-1), de.reshape(N, -1))

    if params.tied:
        d_emb += d_wout
        d_softmax_w = None
    else:
        d_softmax_w = d_wout
    return GradientSet(d_emb, layer_grads, d_softmax_w, d_sb, params.tied)  # type: ignore[arg-type]


@dataclass
class ParamAverage:
    """Running mean of parameters, for tail-averaged evaluation."""

    mean: NetworkParams | None = None
    count: int = 0

    def update(self, params: NetworkParams) -> None:
        self.count += 1
        if self.mean is None:
            self.mean = params.copy()
            return
        inv = 1.0 / self.count
        for m, p in zip(self.mean.named_tensors().values(), params.named_tensors().values()):
            m += (p - m) * inv

    def averaged(self) -> NetworkParams:
        if self.mean is None:
            raise ValueError("no parameters averaged yet")
        return self.mean.copy()


def sgd_step(
    params: NetworkParams,
    grads: GradientSet,
    lr: float,
    average: ParamAverage | None = None,
) -> NetworkParams:
    """In-place theta <- theta - lr * g; optionally feeds the running average."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    grads.check_finite()
    g_tensors = grads.named_tensors()
    for name, p in params.named_tensors().items():
        p -= lr * g_tensors[name]
    if average is not None:
        average.update(params)
    return params


def evaluate(params: NetworkParams, stream: BatchedStream, window: int) -> float:
    """Perplexity = exp(total NLL / token count), dropout off, state carried."""
    if stream.total_steps < 2:
        raise ValueError("empty stream")
    B = stream.batch_size
    masks = DropoutMasks.ones(params, B)
    carry = CarryState.zeros(params, B)
    total_nll = 0.0
    total_tok = 0
    for x, y in bptt_windows(stream, window):
        trace, _ = forward(params, x, y, carry, masks)
        total_nll += trace.nll_sum
        total_tok += trace.n_positions
        carry = trace.carry_out
    return float(np.exp(total_nll / total_tok))


def save_checkpoint(
    path: str | Path,
    params: NetworkParams,
    *,
    phase_index: int = 0,
    seed: int | None = None,
    extra: dict | None = None,
) -> None:
    """Bit-exact tensor dump plus a self-describing JSON header."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "phase_index": phase_index,
        "seed": seed,
        "tied": params.tied,
        "vocab_size": params.vocab_size,
        "emb_size": params.emb_size,
        "hidden_sizes": params.hidden_sizes,
        "dtype": params.dtype.name,
        "extra": extra or {},
    }
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __meta__=header, **params.named_tensors())


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict]:
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        tied = meta["tied"]
        layers = []
        for k in range(1, len(meta["hidden_sizes"]) + 1):
            layers.append(
                LstmLayerParams(
                    archive[f"layer_{k}.w_x"], archive[f"layer_{k}.w_h"], archive[f"layer_{k}.b"]
                )
            )
        params = NetworkParams(
            archive["embedding"],
            layers,
            None if tied else archive["softmax.w"],
            archive["softmax.b"],
            tied,
        )
    return params, meta
