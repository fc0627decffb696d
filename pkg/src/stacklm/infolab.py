"""Exact discrete information theory over small alphabets.

Everything here is exact enumeration in float64: entropy, mutual information
and KL in bits, channel composition along a Markov chain, the cross-entropy
decomposition into conditional entropy plus a KL gap, the data-processing
inequality, and the equality condition under which processing loses nothing.
A Quantizer bridges continuous network states into this discrete world so the
same checks run on real trained models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "JointTable",
    "Channel",
    "Quantizer",
    "entropy",
    "conditional_entropy",
    "mutual_information",
    "kl_divergence",
    "cross_entropy",
    "CeDecomposition",
    "induced_posterior",
    "ce_decomposition",
    "compose",
    "dpi_chain_check",
    "Theorem3Report",
    "theorem3_check",
    "network_mi_probe",
    "save_matrix",
    "load_matrix",
]

_LOG2 = math.log(2.0)
_SUM_TOL = 1e-12


def _check_prob_matrix(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ValueError(f"{what} must be a non-empty 2-D matrix")
    if (p < 0).any():
        raise ValueError(f"{what} has a negative entry")
    return p


@dataclass(frozen=True)
class JointTable:
    """Joint distribution p(a, b) over two finite alphabets; rows index a."""

    p: np.ndarray

    def __post_init__(self):
        p = _check_prob_matrix(self.p, "joint table")
        total = math.fsum(p.reshape(-1).tolist())
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"joint table sums to {total!r}, not 1")
        object.__setattr__(self, "p", p)

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "JointTable":
        c = np.asarray(counts, dtype=np.float64)
        total = c.sum()
        if total <= 0:
            raise ValueError("empty count table")
        return cls(c / total)

    @property
    def shape(self) -> tuple[int, int]:
        return self.p.shape

    def marginal_a(self) -> np.ndarray:
        return self.p.sum(axis=1)

    def marginal_b(self) -> np.ndarray:
        return self.p.sum(axis=0)

    def transpose(self) -> "JointTable":
        return JointTable(self.p.T.copy())


@dataclass(frozen=True)
class Channel:
    """Row-stochastic matrix q(t | x): rows index x, columns index t."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _check_prob_matrix(self.matrix, "channel")
        for i in range(m.shape[0]):
            row_sum = math.fsum(m[i].tolist())
            if abs(row_sum - 1.0) > _SUM_TOL:
                raise ValueError(f"channel row {i} sums to {row_sum!r}, not 1")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, n: int) -> "Channel":
        return cls(np.eye(n))

    @property
    def in_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def out_size(self) -> int:
        return self.matrix.shape[1]

    def push(self, dist: np.ndarray) -> np.ndarray:
        """Marginal of the output given an input distribution."""
        dist = np.asarray(dist, dtype=np.float64)
        if dist.shape != (self.in_size,):
            raise ValueError("distribution size does not match channel input")
        return dist @ self.matrix


def _h_terms(p: np.ndarray) -> float:
    """-sum p ln p with 0 ln 0 = 0, via compensated summation. In nats."""
    flat = np.asarray(p, dtype=np.float64).reshape(-1)
    nz = flat[flat > 0]
    return -math.fsum((nz * np.log(nz)).tolist())


def entropy(dist: np.ndarray) -> float:
    """Shannon entropy in bits."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.size == 0 or (dist < 0).any():
        raise ValueError("need a non-empty 1-D distribution")
    total = math.fsum(dist.tolist())
    if abs(total - 1.0) > _SUM_TOL:
        raise ValueError(f"distribution sums to {total!r}, not 1")
    return _h_terms(dist) / _LOG2


def conditional_entropy(joint: JointTable) -> float:
    """H(B | A) in bits: H(A, B) - H(A)."""
    return (_h_terms(joint.p) - _h_terms(joint.marginal_a())) / _LOG2


def mutual_information(joint: JointTable) -> float:
    """I(A; B) in bits, as an exact sum over the joint's support."""
    p = joint.p
    pa = joint.marginal_a()
    pb = joint.marginal_b()
    terms = []
    nz = np.argwhere(p > 0)
    for a, b in nz:
        terms.append(p[a, b] * math.log(p[a, b] / (pa[a] * pb[b])))
    return math.fsum(terms) / _LOG2


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """D(p || q) in bits; +inf (not an exception) where q = 0 < p."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ValueError("distributions must have matching size")
    for name, d in (("p", p), ("q", q)):
        if (d < 0).any() or abs(math.fsum(d.tolist()) - 1.0) > _SUM_TOL:
            raise ValueError(f"{name} is not a distribution")
    support = p > 0
    if (q[support] == 0).any():
        return math.inf
    terms = (p[support] * np.log(p[support] / q[support])).tolist()
    return math.fsum(terms) / _LOG2


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """-sum p log2 q; +inf where q = 0 < p."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ValueError("distributions must have matching size")
    support = p > 0
    if (q[support] == 0).any():
        return math.inf
    return -math.fsum((p[support] * np.log(q[support])).tolist()) / _LOG2


def compose(chain: Sequence[Channel]) -> Channel:
    """Composition of channels applied in order: one matrix product per link."""
    if not chain:
        raise ValueError("empty chain")
    m = chain[0].matrix
    for k, link in enumerate(chain[1:], 1):
        if link.in_size != m.shape[1]:
            raise ValueError(
                f"link {k}: channel expects {link.in_size} inputs, got {m.shape[1]}"
            )
        m = m @ link.matrix
    return Channel(m)


def _conditional_rows(joint: JointTable) -> np.ndarray:
    """p(b | a) per row; rows with zero marginal become uniform."""
    pa = joint.marginal_a()
    rows = joint.p.copy()
    n_b = rows.shape[1]
    for a in range(rows.shape[0]):
        if pa[a] > 0:
            rows[a] /= pa[a]
        else:
            rows[a] = 1.0 / n_b
    return rows


def induced_posterior(joint_xy: JointTable, chain: Channel) -> np.ndarray:
    """p(y | t) implied by p(x, y) and the processing channel q(t | x).

    Rows index t. Zero-probability t's get a uniform row so the result is a
    valid conditional everywhere; only the support matters downstream.
    """
    if chain.in_size != joint_xy.shape[0]:
        raise ValueError("channel input does not match the joint's first alphabet")
    p_ty = chain.matrix.T @ joint_xy.p           # p(t, y)
    p_t = p_ty.sum(axis=1)
    n_y = p_ty.shape[1]
    out = np.empty_like(p_ty)
    for t in range(p_ty.shape[0]):
        out[t] = p_ty[t] / p_t[t] if p_t[t] > 0 else 1.0 / n_y
    return out


@dataclass(frozen=True)
class CeDecomposition:
    """Cross entropy split into its floor and its model-dependent excess."""

    cross_entropy: float
    h_y_given_x: float
    kl_term: float


def ce_decomposition(joint_xy: JointTable, chain: Channel, model: np.ndarray) -> CeDecomposition:
    """Split E[-log2 Q(y|t)] into H(Y|X) plus an expected KL gap.

    `model` is a row-stochastic matrix Q(y | t), rows indexing t. Both sides
    of the identity are evaluated independently and must agree to 1e-12; a
    larger residual means the arithmetic is broken, so it raises.
    """
    q = _check_prob_matrix(model, "model")
    if chain.in_size != joint_xy.shape[0]:
        raise ValueError("channel input does not match the joint's first alphabet")
    if q.shape != (chain.out_size, joint_xy.shape[1]):
        raise ValueError("model shape does not match (chain outputs, label alphabet)")

    p_x = joint_xy.marginal_a()
    p_y_given_x = _conditional_rows(joint_xy)
    k = chain.matrix

    # Left side: the plain cross entropy, summed directly over (x, t, y).
    ce_terms = []
    infinite = False
    for x in range(joint_xy.shape[0]):
        for t in range(chain.out_size):
            w = p_x[x] * k[x, t]
            if w == 0:
                continue
            for y in range(joint_xy.shape[1]):
                pyx = p_y_given_x[x, y]
                if pyx == 0:
                    continue
                if q[t, y] == 0:
                    infinite = True
                else:
                    ce_terms.append(w * pyx * math.log(q[t, y]))
    ce = math.inf if infinite else -math.fsum(ce_terms) / _LOG2

    # Right side: conditional entropy plus the (x, t)-weighted KL gap.
    h = conditional_entropy(joint_xy)
    kl_terms = []
    kl_infinite = False
    for x in range(joint_xy.shape[0]):
        for t in range(chain.out_size):
            w = p_x[x] * k[x, t]
            if w == 0:
                continue
            d = kl_divergence(p_y_given_x[x], q[t])
            if math.isinf(d):
                kl_infinite = True
            else:
                kl_terms.append(w * d)
    kl = math.inf if kl_infinite else math.fsum(kl_terms)

    if math.isinf(ce) or math.isinf(kl):
        if math.isinf(ce) != math.isinf(kl):
            raise ArithmeticError("decomposition sides disagree about divergence")
    elif abs(ce - (h + kl)) > 1e-12 * max(1.0, abs(ce)):
        raise ArithmeticError(
            f"cross-entropy decomposition identity violated: {ce!r} vs {h + kl!r}"
        )
    return CeDecomposition(ce, h, kl)


def _joint_with_processed(joint_xy: JointTable, chain: Channel) -> JointTable:
    """Joint of (T, Y) when T is the chain applied to X."""
    p_ty = chain.matrix.T @ joint_xy.p
    # Renormalize away accumulated rounding so the table validates cleanly.
    return JointTable(p_ty / math.fsum(p_ty.reshape(-1).tolist()))


def dpi_chain_check(joint_xy: JointTable, chain: Sequence[Channel], tol: float = 1e-10) -> list[float]:
    """MI down a processing chain: [I(Y;X), I(Y;T_1), ..., I(Y;T_L)].

    The sequence can only decrease; a violation beyond tol is an arithmetic
    bug, not a property of the inputs, so it raises.
    """
    if not chain:
        raise ValueError("empty chain")
    mis = [mutual_information(joint_xy)]
    prefix: list[Channel] = []
    for k, link in enumerate(chain, 1):
        expected = prefix[-1].out_size if prefix else joint_xy.shape[0]
        if link.in_size != expected:
            raise ValueError(f"link {k}: channel expects {link.in_size} inputs, got {expected}")
        prefix.append(link)
        mis.append(mutual_information(_joint_with_processed(joint_xy, compose(prefix))))
    for k in range(1, len(mis)):
        if mis[k] > mis[k - 1] + tol:
            raise ArithmeticError(
                f"information increased along the chain at stage {k}: "
                f"{mis[k - 1]!r} -> {mis[k]!r}"
            )
    return mis


@dataclass(frozen=True)
class Theorem3Report:
    """Whether processing lost nothing, and the per-stage MI gaps if it did."""

    holds: bool
    gaps: list[float]
    mi_sequence: list[float]


def theorem3_check(
    joint_xy: JointTable,
    chain: Sequence[Channel],
    tol: float = 1e-10,
) -> Theorem3Report:
    """Test the lossless-processing condition p(y|t_L) == p(y|x) on support.

    When the condition holds, every stage's MI must equal I(Y;X); a residual
    gap beyond tol then raises. When it fails, the positive gaps are simply
    reported.
    """
    mis = dpi_chain_check(joint_xy, chain, tol=tol)
    full = compose(list(chain))
    p_x = joint_xy.marginal_a()
    p_y_given_x = _conditional_rows(joint_xy)
    p_y_given_t = induced_posterior(joint_xy, full)

    holds = True
    for x in range(joint_xy.shape[0]):
        if p_x[x] == 0:
            continue
        for t in range(full.out_size):
            if full.matrix[x, t] == 0:
                continue
            if np.abs(p_y_given_t[t] - p_y_given_x[x]).max() > tol:
                holds = False
                break
        if not holds:
            break

    gaps = [mis[0] - m for m in mis[1:]]
    if holds:
        for k, gap in enumerate(gaps, 1):
            if abs(gap) > tol:
                raise ArithmeticError(
                    f"lossless condition holds but stage {k} shows an MI gap of {gap!r}"
                )
    return Theorem3Report(holds, gaps, mis)


@dataclass(frozen=True)
class Quantizer:
    """Per-dimension binning of continuous vectors into discrete symbols.

    The same strictly increasing edge list applies to every dimension; a
    vector's code is the tuple of bin indices (a product code). The default
    single edge at 0 keeps only the sign pattern.
    """

    edges: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        e = tuple(float(v) for v in self.edges)
        if any(not (a < b) for a, b in zip(e, e[1:])):
            raise ValueError("bin edges must be strictly increasing")
        object.__setattr__(self, "edges", e)

    @property
    def bins_per_dim(self) -> int:
        return len(self.edges) + 1

    def quantize(self, vectors: np.ndarray) -> np.ndarray:
        """Bin index per entry: (N, d) float -> (N, d) int64."""
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("expected an (N, d) matrix of states")
        if not self.edges:
            return np.zeros(v.shape, dtype=np.int64)
        return np.searchsorted(np.asarray(self.edges), v, side="right").astype(np.int64)

    def symbols(self, vectors: np.ndarray) -> np.ndarray:
        """Dense symbol id per row (N,), two rows equal iff codes equal."""
        codes = self.quantize(vectors)
        _, inverse = np.unique(codes, axis=0, return_inverse=True)
        return inverse.astype(np.int64)


def _symbol_ids(rows: np.ndarray) -> np.ndarray:
    _, inverse = np.unique(rows, axis=0, return_inverse=True)
    return inverse.astype(np.int64)


def _empirical_mi(sym_a: np.ndarray, sym_b: np.ndarray) -> float:
    n_a = int(sym_a.max()) + 1
    n_b = int(sym_b.max()) + 1
    counts = np.zeros((n_a, n_b), dtype=np.float64)
    np.add.at(counts, (sym_a, sym_b), 1.0)
    return mutual_information(JointTable.from_counts(counts))


def network_mi_probe(
    params,
    quantizer: Quantizer,
    inputs: np.ndarray,
    labels: np.ndarray,
    *,
    symbol_budget: int = 4096,
    tol: float = 1e-10,
    require_monotone: bool = False,
) -> list[float]:
    """MI between labels and each layer's quantized final hidden state.

    Runs the real network over an exactly enumerated input set (each row one
    sequence), quantizes every layer's last-timestep hidden state, and returns
    [I(Y;X), I(Y;T_1), ..., I(Y;T_L)] from the empirical joints. All states
    are deterministic functions of the input, so no value may exceed I(Y;X);
    that bound is always enforced. Consecutive stages, however, need not be
    monotone: quantization is lossy, so sign(T_2) is a function of T_1 but not
    of sign(T_1), and random-init networks do exhibit increases. Pass
    require_monotone=True only for chains where each quantized state really
    determines the next.
    """
    from .netcore import forward  # deferred: avoids a cycle at import time

    inputs = np.asarray(inputs)
    labels = np.asarray(labels).reshape(-1)
    if inputs.ndim != 2 or inputs.shape[0] != labels.shape[0]:
        raise ValueError("need (N, T) inputs with one label per row")
    n = inputs.shape[0]
    if n > 4096:
        raise ValueError("input set too large to enumerate exactly")

    trace, _ = forward(params, inputs, np.zeros_like(inputs))
    label_sym = _symbol_ids(labels.reshape(-1, 1))
    mis = [_empirical_mi(_symbol_ids(inputs), label_sym)]
    for k in range(params.layer_count):
        state = trace.hidden[k][:, -1, :]
        sym = quantizer.symbols(state)
        n_symbols = int(sym.max()) + 1
        if n_symbols > symbol_budget:
            raise ValueError(
                f"layer {k + 1} produced {n_symbols} symbols, over the budget of "
                f"{symbol_budget}; use coarser bins"
            )
        mis.append(_empirical_mi(sym, label_sym))

    for k in range(1, len(mis)):
        if mis[k] > mis[0] + tol:
            raise ArithmeticError(f"layer {k} reports more information than the input")
        if require_monotone and mis[k] > mis[k - 1] + tol:
            raise ArithmeticError(
                f"MI increased from stage {k - 1} to {k}: {mis[k - 1]!r} -> {mis[k]!r}"
            )
    return mis


def save_matrix(path: str | Path, m: np.ndarray) -> None:
    """Write a matrix as a '<rows> <cols>' header plus one text row per line."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("only 2-D matrices are supported")
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    for row in m:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path: str | Path) -> np.ndarray:
    """Inverse of save_matrix; parse errors carry 1-based line numbers."""
    path = Path(path)
    rows: list[list[float]] = []
    header: tuple[int, int] | None = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if header is None:
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: header must be '<rows> <cols>'")
            try:
                header = (int(parts[0]), int(parts[1]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: header must hold two integers") from None
            if header[0] < 1 or header[1] < 1:
                raise ValueError(f"{path}:{lineno}: matrix dimensions must be positive")
            continue
        if len(parts) != header[1]:
            raise ValueError(f"{path}:{lineno}: expected {header[1]} values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number") from None
        if len(rows) > header[0]:
            raise ValueError(f"{path}:{lineno}: more rows than the header declares")
    if header is None:
        raise ValueError(f"{path}:1: empty matrix file")
    if len(rows) != header[0]:
        raise ValueError(f"{path}: expected {header[0]} rows, got {len(rows)}")
    return np.array(rows, dtype=np.float64)
