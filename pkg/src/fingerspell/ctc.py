"""CTC loss, alphabet masking, greedy decoding, and the combined objective.

The loss sums path probabilities over all frame-level alignments whose
collapse (merge consecutive duplicates, then delete blanks) equals the
target, computed by the standard forward-backward recursion over the
blank-interleaved target in log space.  Gradients w.r.t. the input
log-probabilities are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import (BLANK_INDEX, N_CLASSES, DataError, LossWeights,
                        indices_to_word, letter_to_index, validate_word,
                        word_to_indices)
from .nn import log_softmax, softmax

NEG_INF = -np.inf


def collapse(path, blank=BLANK_INDEX):
    """CTC collapse: merge consecutive duplicate symbols, then delete blanks.

    Works over any symbol sequence; a string input (blank ``-`` by convention)
    returns a string.
    """
    if isinstance(path, str) and blank == BLANK_INDEX:
        blank = "-"
    out = []
    prev = object()
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    if isinstance(path, str):
        return "".join(out)
    return out


@dataclass(frozen=True)
class CtcResult:
    loss: float
    grad: np.ndarray
    feasible: bool


def _as_target(target) -> np.ndarray:
    if isinstance(target, str):
        return word_to_indices(target)
    return np.asarray(target, dtype=np.int64)


def min_frames_for(target) -> int:
    """Shortest T that admits any valid alignment: one frame per letter plus a
    blank separator between adjacent repeats."""
    y = _as_target(target)
    return len(y) + int(np.sum(y[1:] == y[:-1]))


def ctc_loss(logprobs: np.ndarray, target) -> CtcResult:
    """-log p(target | logprobs) with its exact gradient.

    ``logprobs`` rows must be normalized log-probabilities (checked loosely,
    at 1e-3, so finite-difference probes remain valid).  An infeasible target
    (too few frames, or all paths masked out) yields loss=+inf, zero gradient,
    feasible=False.
    """
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if logprobs.ndim != 2:
        raise DataError(f"logprobs must be 2-D, got shape {logprobs.shape}")
    T, C = logprobs.shape
    if T < 1:
        raise DataError("need at least one frame")
    with np.errstate(over="ignore"):
        lse = np.log(np.sum(np.exp(logprobs - logprobs.max(axis=1, keepdims=True)),
                            axis=1)) + logprobs.max(axis=1)
    if np.any(np.abs(lse) > 1e-3):
        raise DataError("logprob rows are not normalized (pass log-probabilities, not logits)")
    y = _as_target(target)
    if len(y) == 0:
        raise DataError("empty target")
    if np.any((y < 1) | (y >= C)):
        raise DataError("target symbol outside class range")

    grad = np.zeros_like(logprobs)
    if T < min_frames_for(y):
        return CtcResult(loss=np.inf, grad=grad, feasible=False)

    # blank-interleaved target: - y1 - y2 - ... - yL -
    S = 2 * len(y) + 1
    ext = np.full(S, BLANK_INDEX, dtype=np.int64)
    ext[1::2] = y
    # states reachable by a skip transition (non-blank, different from s-2)
    can_skip = np.zeros(S, dtype=bool)
    can_skip[2:] = (ext[2:] != BLANK_INDEX) & (ext[2:] != ext[:-2])

    lp_ext = logprobs[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp_ext[0, 0]
    if S > 1:
        alpha[0, 1] = lp_ext[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        cand = prev.copy()
        cand[1:] = np.logaddexp(cand[1:], prev[:-1])
        skip_from = prev[:-2][can_skip[2:]]
        cand[2:][can_skip[2:]] = np.logaddexp(cand[2:][can_skip[2:]], skip_from)
        alpha[t] = cand + lp_ext[t]

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = np.logaddexp(log_z, alpha[T - 1, S - 2])
    if not np.isfinite(log_z):
        return CtcResult(loss=np.inf, grad=grad, feasible=False)

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp_ext[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp_ext[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        cand = nxt.copy()
        cand[:-1] = np.logaddexp(cand[:-1], nxt[1:])
        skip_to = nxt[2:][can_skip[2:]]
        cand[:-2][can_skip[2:]] = np.logaddexp(cand[:-2][can_skip[2:]], skip_to)
        beta[t] = cand + lp_ext[t]

    # occupancy: paths through state s at time t carry alpha*beta with the
    # emission counted twice; divide it back out, then normalize by p(y|x)
    z = alpha + beta
    with np.errstate(invalid="ignore"):
        w = np.where(np.isneginf(z), NEG_INF, z - lp_ext)
    occ = np.exp(w - log_z)  # (T, S)
    for t in range(T):
        np.add.at(grad[t], ext, -occ[t])
    return CtcResult(loss=float(-log_z), grad=grad, feasible=True)


def word_mask(word: str) -> np.ndarray:
    """Boolean (27,) mask: blank plus the letters of ``word``."""
    validate_word(word)
    allowed = np.zeros(N_CLASSES, dtype=bool)
    allowed[BLANK_INDEX] = True
    for c in set(word):
        allowed[letter_to_index(c)] = True
    return allowed


def mask_to_word(logits: np.ndarray, word: str) -> np.ndarray:
    """Mask letters outside ``word`` to -inf and renormalize rows.

    Blank is always permitted so co-articulation frames stay expressible.
    Input is raw logits; output rows are log-probabilities.
    """
    allowed = word_mask(word)
    masked = np.where(allowed, logits, NEG_INF)
    return log_softmax(masked, axis=-1)


def masked_log_softmax_backward(logprobs: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of (mask + log-softmax) w.r.t. the raw logits.

    Masked classes have probability exactly 0, so their logit gradient is 0.
    """
    probs = np.exp(logprobs)
    return dy - probs * dy.sum(axis=-1, keepdims=True)


def greedy_decode(logprobs: np.ndarray):
    """Per-frame argmax (ties break to the lowest class index) then collapse.

    Returns (alignment path as an int array, decoded letter string).
    """
    logprobs = np.asarray(logprobs)
    path = np.argmax(logprobs, axis=-1)
    return path, indices_to_word(collapse(path.tolist()))


def per_frame_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over labeled frames; label -1 marks an unlabeled frame.

    Labels live in the 27-class space (blank included).  Returns
    (loss, gradient w.r.t. logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != logits.shape[0]:
        raise DataError("labels length must equal frame count")
    labeled = labels >= 0
    n = int(labeled.sum())
    if n == 0:
        raise DataError("no labeled frames")
    lp = log_softmax(logits, axis=-1)
    rows = np.nonzero(labeled)[0]
    loss = float(-lp[rows, labels[rows]].mean())
    grad = np.zeros_like(logits)
    grad[rows] = softmax(logits[rows], axis=-1)
    grad[rows, labels[rows]] -= 1.0
    grad[rows] /= n
    return loss, grad


def combined_loss(loss_frame: float, loss_ctc: float, w: LossWeights) -> float:
    return w.lambda_f * loss_frame + w.lambda_ctc * loss_ctc
