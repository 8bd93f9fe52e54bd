"""CTC loss (log-space forward-backward) and greedy decoding.

The blank symbol is index 0 everywhere. The loss is computed over the
blank-augmented state sequence [blank, t1, blank, t2, ..., blank] with the
usual self / advance-1 / skip-2 transitions, entirely in float64 log space.
The gradient is taken with respect to the per-frame log-probabilities as
free variables, so it composes with a log-softmax node.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad

BLANK = 0
NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be emitted in the available number of frames."""


def min_frames(target: Sequence[int]) -> int:
    """Shortest frame count that can emit the target: length + repeat pairs."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _validate(log_probs: np.ndarray, target: Sequence[int]) -> np.ndarray:
    lp = np.asarray(log_probs)
    if lp.ndim != 2:
        raise ValueError(f"log_probs must be 2-D, got shape {lp.shape}")
    t, v = lp.shape
    if t < 1 or v < 2:
        raise ValueError("need T >= 1 frames and at least blank + one symbol")
    rows = np.logaddexp.reduce(lp.astype(np.float64), axis=1)
    if np.max(np.abs(rows)) > 1e-3:
        raise ValueError("log_probs rows are not log-softmax normalized")
    for s in target:
        if not 1 <= s <= v - 1:
            raise ValueError(f"target symbol {s} outside [1, {v - 1}]")
    if t < min_frames(target):
        raise InfeasibleTargetError(
            f"target needs >= {min_frames(target)} frames, got {t}")
    return lp


def _extend(target: list[int]) -> tuple[np.ndarray, np.ndarray]:
    ext = np.empty(2 * len(target) + 1, dtype=np.int64)
    ext[0::2] = BLANK
    ext[1::2] = target
    # skip transition s-2 -> s allowed for non-blank states with a distinct predecessor label
    can_skip = np.zeros(ext.size, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, can_skip


def _alpha(emit: np.ndarray, can_skip: np.ndarray) -> np.ndarray:
    t_len, s_len = emit.shape
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(s_len, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(s_len, NEG_INF)
        skip[2:] = prev[:-2]
        skip[~can_skip] = NEG_INF
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + emit[t]
    return alpha


def ctc_loss_value(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Loss only (forward recursion only); same contract as ctc_loss."""
    lp = _validate(log_probs, target).astype(np.float64)
    target = list(target)
    if not target:
        return -float(lp[:, BLANK].sum())
    ext, can_skip = _extend(target)
    alpha = _alpha(lp[:, ext], can_skip)
    tail = alpha[-1, -2] if ext.size > 1 else NEG_INF
    return float(-np.logaddexp(alpha[-1, -1], tail))


def ctc_loss(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of the target plus d loss / d log_probs."""
    lp = _validate(log_probs, target).astype(np.float64)
    t_len, vocab = lp.shape
    target = list(target)

    if not target:
        # Only the all-blank path remains.
        loss = -float(lp[:, BLANK].sum())
        grad = np.zeros_like(lp)
        grad[:, BLANK] = -1.0
        return loss, grad.astype(np.asarray(log_probs).dtype)

    ext, can_skip = _extend(target)
    s_len = ext.size
    emit = lp[:, ext]  # (T, S)
    alpha = _alpha(emit, can_skip)
    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2] if s_len > 1 else NEG_INF)

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.full(s_len, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(s_len, NEG_INF)
        skip[:-2] = np.where(can_skip[2:], nxt[2:], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), skip) + emit[t]

    # alpha and beta both include the emission at t, so alpha + beta - emit is
    # log(sum over paths through state s at t of the full path product); since
    # d loss / d y[t,k] = -(1/P) * sum_{s: ext[s]=k} alpha*beta / p_t(k), the
    # same emission cancels and each state contributes exp(gamma - log P).
    with np.errstate(invalid="ignore"):
        gamma = alpha + beta - emit

    grad = np.zeros_like(lp)
    for s in range(s_len):
        reachable = np.isfinite(gamma[:, s])
        if not reachable.any():
            continue
        grad[reachable, ext[s]] -= np.exp(gamma[reachable, s] - log_p)

    return float(-log_p), grad.astype(np.asarray(log_probs).dtype)


def ctc_loss_node(log_probs_node: ad.Tensor, target: Sequence[int]) -> ad.Tensor:
    """ctc_loss as an autodiff node over a log-softmax output."""
    loss, grad = ctc_loss(log_probs_node.data, target)
    return ad.from_loss_and_grad(log_probs_node, loss, grad, op="ctc_loss")


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax in float64 (normalizes forward() output for CTC)."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax (ties -> lowest index), collapse repeats, drop blanks."""
    lp = np.asarray(log_probs)
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise ValueError(f"log_probs must be (T, V) with T >= 1, got {lp.shape}")
    best = np.argmax(lp, axis=1)
    out: list[int] = []
    prev = -1
    for sym in best:
        if sym != prev and sym != BLANK:
            out.append(int(sym))
        prev = sym
    return out
