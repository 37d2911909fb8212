"""CTC loss via log-space forward-backward, plus decoding and an
exhaustive-enumeration oracle used to verify it.

Conventions: blank id is 0, vocabulary ids start at 1, log-posterior
matrices are [T, V+1] with column 0 = blank.
"""

import itertools

import numpy as np

from .errors import CtcInfeasibleError, NumericError
from .numerics import Tensor, _accum, _record

BLANK = 0

ORACLE_PATH_GUARD = 10 ** 7


def required_frames(labels):
    """Minimum number of frames a label sequence needs: one per label plus
    a separating blank between adjacent repeats."""
    rep = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + rep


def _augment(labels):
    ext = [BLANK]
    for y in labels:
        ext.append(y)
        ext.append(BLANK)
    return ext


def ctc_loss(log_post, labels, utt_id=None):
    """-log P(labels | log_post) by the forward recursion over the
    blank-augmented sequence; differentiable w.r.t. log_post."""
    labels = list(labels)
    if len(labels) < 1:
        raise NumericError("empty label sequence")
    lp = log_post.data if isinstance(log_post, Tensor) else np.asarray(log_post, dtype=np.float64)
    T = lp.shape[0]
    need = required_frames(labels)
    if T < need:
        raise CtcInfeasibleError(need, T, utt_id)
    ext = _augment(labels)
    S = len(ext)

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, BLANK]
    alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = np.logaddexp(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2]:
                a = np.logaddexp(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + lp[t, ext[s]]
    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])

    out = Tensor(-log_p)
    if not isinstance(log_post, Tensor):
        return out

    def backward(g):
        beta = np.full((T, S), -np.inf)
        beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S - 1, -1, -1):
                b = beta[t + 1, s]
                if s + 1 < S:
                    b = np.logaddexp(b, beta[t + 1, s + 1])
                if s + 2 < S and ext[s + 2] != BLANK and ext[s + 2] != ext[s]:
                    b = np.logaddexp(b, beta[t + 1, s + 2])
                beta[t, s] = b + lp[t, ext[s]]
        # alpha and beta both include the frame-t emission, so the log-mass
        # of paths through (t, s) is alpha + beta - lp[t, ext[s]].
        grad = np.zeros_like(lp)
        for t in range(T):
            for s in range(S):
                occ = alpha[t, s] + beta[t, s] - lp[t, ext[s]] - log_p
                grad[t, ext[s]] -= np.exp(occ)
        _accum(log_post, grad * float(g))

    return _record(out, (log_post,), backward)


def ctc_oracle(log_post, labels):
    """Brute-force -log P(labels): sum over every length-T path whose
    collapse equals the labels. Guarded to (V+1)^T <= 10^7 paths."""
    lp = log_post.data if isinstance(log_post, Tensor) else np.asarray(log_post, dtype=np.float64)
    T, C = lp.shape
    if C ** T > ORACLE_PATH_GUARD:
        raise NumericError(f"oracle guard exceeded: {C}^{T} paths")
    labels = list(labels)
    log_terms = []
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == labels:
            log_terms.append(sum(lp[t, path[t]] for t in range(T)))
    if not log_terms:
        return float("inf")
    m = max(log_terms)
    return -(m + np.log(sum(np.exp(v - m) for v in log_terms)))


def collapse(path):
    """Merge adjacent repeats, then delete blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev:
            out.append(p)
        prev = p
    return [p for p in out if p != BLANK]


def greedy_decode(log_post):
    """Per-frame argmax (ties go to the lowest id), then collapse."""
    lp = log_post.data if isinstance(log_post, Tensor) else np.asarray(log_post)
    path = np.argmax(lp, axis=1)
    return collapse(path.tolist())
