"""Sequential DP kernels: CTC forward-backward and word-level edit alignment.

Both kernels are written twice: a numba ``@njit`` version and a plain
numpy/Python version. ``CTXASR_NUMBA=0`` in the environment (read at import)
selects the fallback; so does a missing numba install. ``use_numba`` can
switch at runtime, which is how the tests and the benchmark compare them.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
_use = [HAVE_NUMBA and os.environ.get("CTXASR_NUMBA", "1") != "0"]

NEG_INF = -np.inf

# edit operation codes
OP_MATCH, OP_SUB, OP_DEL, OP_INS = 0, 1, 2, 3


def use_numba(flag: bool | None = None) -> bool:
    """Query or set whether the numba kernels are active."""
    if flag is not None:
        _use[0] = bool(flag) and HAVE_NUMBA
    return _use[0]


def ctc_min_frames(target) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    target = np.asarray(target)
    return int(len(target) + np.count_nonzero(target[1:] == target[:-1]))


# ---------------------------------------------------------------- CTC, numpy path

def _lse2(a, b):
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = m + np.log(np.exp(a - m) + np.exp(b - m))
    return np.where(np.isneginf(m), NEG_INF, out)


def _ctc_numpy(log_probs, target, blank):
    T = log_probs.shape[0]
    L = len(target)
    S = 2 * L + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=bool)
    if L > 1:
        skip[3::2] = ext[3::2] != ext[1:-2:2]
    lp = log_probs[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse2(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _lse2(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse2(acc[:-1], nxt[1:])
        # s may jump to s+2 when s+2 is a non-repeated label
        acc[:-2] = np.where(skip[2:], _lse2(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t]

    ll = alpha[T - 1, S - 1] if S == 1 else _lse2(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - lp - ll)
    occ = np.nan_to_num(occ, nan=0.0)
    grad = np.zeros_like(log_probs)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return -float(ll), grad


# ---------------------------------------------------------------- CTC, numba path

def _ctc_numba_impl(log_probs, target, blank):
    T = log_probs.shape[0]
    V = log_probs.shape[1]
    L = target.shape[0]
    S = 2 * L + 1
    ext = np.empty(S, dtype=np.int64)
    for s in range(S):
        ext[s] = blank if s % 2 == 0 else target[s // 2]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            b = alpha[t - 1, s - 1] if s >= 1 else -np.inf
            c = -np.inf
            if s >= 2 and s % 2 == 1 and ext[s] != ext[s - 2]:
                c = alpha[t - 1, s - 2]
            m = max(a, max(b, c))
            if m == -np.inf:
                alpha[t, s] = -np.inf
            else:
                alpha[t, s] = m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m)) + log_probs[t, ext[s]]
    beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            a = beta[t + 1, s]
            b = beta[t + 1, s + 1] if s + 1 < S else -np.inf
            c = -np.inf
            if s + 2 < S and (s + 2) % 2 == 1 and ext[s + 2] != ext[s]:
                c = beta[t + 1, s + 2]
            m = max(a, max(b, c))
            if m == -np.inf:
                beta[t, s] = -np.inf
            else:
                beta[t, s] = m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m)) + log_probs[t, ext[s]]
    if S == 1:
        ll = alpha[T - 1, 0]
    else:
        a = alpha[T - 1, S - 1]
        b = alpha[T - 1, S - 2]
        m = max(a, b)
        ll = -np.inf if m == -np.inf else m + np.log(np.exp(a - m) + np.exp(b - m))
    grad = np.zeros((T, V))
    for t in range(T):
        for s in range(S):
            v = alpha[t, s] + beta[t, s]
            if v != -np.inf:
                grad[t, ext[s]] -= np.exp(v - log_probs[t, ext[s]] - ll)
    return -ll, grad


# ---------------------------------------------------------------- edit alignment

def _align_python(ref, hyp):
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            c = prev[j - 1] + (0 if ri == hyp[j - 1] else 1)
            dl = prev[j] + 1
            ins = row[j - 1] + 1
            row[j] = min(c, dl, ins)
    return _backtrace(d, ref, hyp)


def _backtrace(d, ref, hyp):
    i, j = len(ref), len(hyp)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if d[i, j] == d[i - 1, j - 1] + (0 if same else 1):
                ops.append(OP_MATCH if same else OP_SUB)
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(OP_DEL)
            i -= 1
        else:
            ops.append(OP_INS)
            j -= 1
    return np.array(ops[::-1], dtype=np.int64)


def _align_numba_impl(ref, hyp):
    n = ref.shape[0]
    m = hyp.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            dl = d[i - 1, j] + 1
            ins = d[i, j - 1] + 1
            best = c
            if dl < best:
                best = dl
            if ins < best:
                best = ins
            d[i, j] = best
    ops = np.empty(n + m, dtype=np.int64)
    k = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if d[i, j] == d[i - 1, j - 1] + (0 if same else 1):
                ops[k] = 0 if same else 1
                k += 1
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops[k] = 2
            i -= 1
        else:
            ops[k] = 3
            j -= 1
        k += 1
    return ops[:k][::-1].copy()


if HAVE_NUMBA:
    _ctc_numba = numba.njit(cache=True)(_ctc_numba_impl)
    _align_numba = numba.njit(cache=True)(_align_numba_impl)


def ctc_forward_backward(log_probs, target, blank: int):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is [T, V+1] (float64 is used internally). The gradient is
    taken with the rows treated as free inputs, i.e. minus the per-frame
    label occupancy.
    """
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    tg = np.ascontiguousarray(target, dtype=np.int64)
    if _use[0]:
        nll, grad = _ctc_numba(lp, tg, int(blank))
        return float(nll), grad
    return _ctc_numpy(lp, tg, int(blank))


def edit_alignment(ref_ids, hyp_ids) -> np.ndarray:
    """Minimal-cost alignment as a sequence of OP_* codes.

    Ties on the backtrace prefer the diagonal (match/substitution), then
    deletion, then insertion.
    """
    r = np.ascontiguousarray(ref_ids, dtype=np.int64)
    h = np.ascontiguousarray(hyp_ids, dtype=np.int64)
    if _use[0]:
        return _align_numba(r, h)
    return _align_python(r, h)
