"""Gated trade-off routing over the four experts, plus its regularizer.

Per token, an FFN router scores the three fine-grained experts (pose,
relation, background); the scores are softmaxed into mixture weights and
the coarse expert enters through the complement of the routing gate
G = max weight. Confident routing therefore mutes the coarse stream and
uncertain routing leans on it. The regularizer penalizes squared
log-sum-exp of the raw logits so no expert can win by logit inflation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import (
    FfnParams,
    Node,
    add,
    concat_cols,
    ffn_forward,
    init_ffn,
    logsumexp_rows,
    matmul,
    mul,
    mul_const,
    register_grad_case,
    row_max,
    shape_of,
    softmax_rows,
    square,
    sub,
    sum_all,
    value_of,
)

N_FINE_EXPERTS = 3

DEFAULT_ALPHA = 0.05


@dataclass
class RouterParams:
    fine_ffn: FfnParams  # d -> hidden -> N_FINE_EXPERTS raw logits
    coarse_weight: object  # (d, 1) scalar head for the coarse logit
    coarse_bias: object  # (1,)


def init_router(rng: np.random.Generator, d: int, hidden: int = 0) -> RouterParams:
    return RouterParams(
        fine_ffn=init_ffn(rng, d, hidden or 2 * d, N_FINE_EXPERTS),
        coarse_weight=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 1)),
        coarse_bias=np.zeros(1),
    )


@dataclass
class RouterDecision:
    """One routing outcome: weights n x N, gate n x 1, fused tokens n x d."""

    weights: object
    gate: object
    fused: object
    raw_fine_logits: object
    raw_coarse_logit: object


def route_weights(h, params: RouterParams):
    """Router FFN then per-token softmax across the fine experts.

    Returns (weights, raw_fine_logits); the raw logits feed the
    regularizer, so they are not thrown away after normalization.
    """
    logits = ffn_forward(h, params.fine_ffn)
    n_out = shape_of(logits)[1]
    if n_out != N_FINE_EXPERTS:
        raise DimensionError(
            f"router must emit {N_FINE_EXPERTS} logits per token, got {n_out}"
        )
    return softmax_rows(logits), logits


def coarse_logit(h, params: RouterParams):
    """Parallel scalar head on the same tokens: n x 1 raw coarse logits."""
    return add(matmul(h, params.coarse_weight), params.coarse_bias)


def gated_combine(weights, gate_source, fine_outputs, coarse_output):
    """Mix expert outputs: z_t = sum_i w_ti E_i,t + (1 - G_t) E_g,t.

    The gate G is the row-max of `gate_source` (normally the weights
    themselves; kept as an explicit argument so ablations can gate on
    something else without touching the mixing math).
    """
    if len(fine_outputs) != N_FINE_EXPERTS:
        raise ContractError(
            f"expected {N_FINE_EXPERTS} fine expert outputs, got {len(fine_outputs)}"
        )
    n, n_w = shape_of(weights)
    if n_w != N_FINE_EXPERTS:
        raise DimensionError(f"weights must be n x {N_FINE_EXPERTS}, got {(n, n_w)}")
    shape = shape_of(coarse_output)
    for i, e in enumerate(fine_outputs):
        if shape_of(e) != shape:
            raise DimensionError(
                f"fine expert {i} shape {shape_of(e)} != coarse shape {shape}"
            )
    if shape[0] != n:
        raise DimensionError(f"{n} weight rows for {shape[0]} token rows")

    from .numerics import slice_cols

    z = None
    for i, e in enumerate(fine_outputs):
        term = mul(slice_cols(weights, i, i + 1), e)  # column broadcasts over d
        z = term if z is None else add(z, term)
    gate = row_max(gate_source)
    coarse_coeff = sub(_ones_like_col(gate), gate)
    return add(z, mul(coarse_coeff, coarse_output))


def _ones_like_col(gate):
    return np.ones((shape_of(gate)[0], 1))


def tradeoff_loss(raw_fine_logits, raw_coarse_logit):
    """Mean squared log-sum-exp of each token's four raw logits.

    Zero exactly when every token's exponentials sum to 1; grows with
    logit magnitude, which is what keeps the router honest.
    """
    n, m = shape_of(raw_fine_logits)
    if shape_of(raw_coarse_logit) != (n, 1):
        raise DimensionError(
            f"coarse logit must be ({n}, 1), got {shape_of(raw_coarse_logit)}"
        )
    stacked = concat_cols(raw_fine_logits, raw_coarse_logit)
    per_token = square(logsumexp_rows(stacked))
    return mul_const(sum_all(per_token), 1.0 / n)


def total_loss(task_loss, lz, alpha: float = DEFAULT_ALPHA):
    """task + alpha * regularizer; alpha = 0.05 unless overridden."""
    if isinstance(task_loss, Node) or isinstance(lz, Node):
        return add(_as_scalar(task_loss, task_loss), mul_const(_as_scalar(lz, task_loss), alpha))
    return float(np.asarray(task_loss).reshape(())) + alpha * float(
        np.asarray(lz).reshape(())
    )


def _as_scalar(x, peer):
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=np.float64).reshape((1, 1))
    if isinstance(peer, Node):
        return peer.tape.leaf(arr)
    return arr


def route_tokens(h, fine_outputs, coarse_output, params: RouterParams) -> RouterDecision:
    """Full routing pass: weights, gate, coarse head, and fused tokens."""
    weights, raw_fine = route_weights(h, params)
    fused = gated_combine(weights, weights, fine_outputs, coarse_output)
    return RouterDecision(
        weights=weights,
        gate=row_max(weights),
        fused=fused,
        raw_fine_logits=raw_fine,
        raw_coarse_logit=coarse_logit(h, params),
    )


def expert_utilization(decisions) -> np.ndarray:
    """Mean share per expert over a batch of routing decisions.

    Entries are (fine_1, fine_2, fine_3, coarse) where the coarse share
    comes from the mean (1 - G); the vector is normalized to sum to 1.
    """
    if not decisions:
        raise ContractError("expert_utilization needs at least one decision")
    fine = np.concatenate([value_of(d.weights) for d in decisions], axis=0)
    gates = np.concatenate([value_of(d.gate).reshape(-1) for d in decisions])
    raw = np.append(fine.mean(axis=0), (1.0 - gates).mean())
    return raw / raw.sum()


# ---------------------------------------------------------------------------
# gradient cases


@register_grad_case("gated_combine")
def _case_gated_combine(seed: int):
    rng = np.random.default_rng(seed)
    n, d = 4, 5
    logits = rng.normal(size=(n, N_FINE_EXPERTS))
    fines = [rng.normal(size=(n, d)) for _ in range(N_FINE_EXPERTS)]
    coarse = rng.normal(size=(n, d))
    probe = rng.normal(size=(n, d))

    def f(lg, e1, e2, e3, cg):
        w = softmax_rows(lg)
        z = gated_combine(w, w, [e1, e2, e3], cg)
        return sum_all(mul_const(z, probe))

    return f, [logits, *fines, coarse], None


@register_grad_case("router_total_loss")
def _case_router_total_loss(seed: int):
    # the whole routed path: tokens -> router ffn -> softmax/gate ->
    # fused readout, plus the regularizer on raw logits, through total_loss
    rng = np.random.default_rng(seed)
    n, d = 3, 6
    h = rng.normal(size=(n, d))
    params = init_router(rng, d)
    fines = [rng.normal(size=(n, d)) for _ in range(N_FINE_EXPERTS)]
    coarse = rng.normal(size=(n, d))
    probe = rng.normal(size=(n, d))

    def f(hn, w1, b1, w2, b2, cw, cb, e1, e2, e3, cg):
        p = RouterParams(FfnParams(w1, b1, w2, b2), cw, cb)
        dec = route_tokens(hn, [e1, e2, e3], cg, p)
        task = sum_all(mul_const(dec.fused, probe))
        lz = tradeoff_loss(dec.raw_fine_logits, dec.raw_coarse_logit)
        return total_loss(task, lz, alpha=0.05)

    arrays = [
        h, params.fine_ffn.weight1,
        rng.normal(0.0, 0.4, size=np.shape(params.fine_ffn.bias1)),
        params.fine_ffn.weight2,
        rng.normal(0.0, 0.4, size=np.shape(params.fine_ffn.bias2)),
        params.coarse_weight, params.coarse_bias, *fines, coarse,
    ]
    return f, arrays, None
