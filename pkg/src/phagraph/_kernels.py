"""Compiled inner loops for walk sampling and embedding SGD."""

import numpy as np
from numba import njit, prange

CLAMP = 1e6

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_WALK_MIX = np.uint64(0xD1B54A32D192ED03)
_EPOCH_MIX = np.uint64(0x8CB92BA72F3D8DD7)


@njit(cache=True, inline="always")
def _next(state):
    # splitmix64
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _uniform(state):
    return (_next(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def _below(state, n):
    k = np.int64(_uniform(state) * n)
    return k if k < n else n - 1


@njit(cache=True)
def _seed_state(state, seed, epoch, walk):
    state[0] = np.uint64(seed) ^ (np.uint64(walk) * _WALK_MIX) ^ (np.uint64(epoch) * _EPOCH_MIX)
    _next(state)


@njit(cache=True)
def _step(state, x, indptr, indices, cumw, weighted):
    lo = indptr[x]
    hi = indptr[x + 1]
    if hi == lo:
        return -1
    if not weighted:
        return indices[lo + _below(state, hi - lo)]
    base = cumw[lo - 1] if lo > 0 else 0.0
    target = base + _uniform(state) * (cumw[hi - 1] - base)
    # first k in [lo, hi) with cumw[k] > target
    a = lo
    b = hi - 1
    while a < b:
        mid = (a + b) // 2
        if cumw[mid] > target:
            b = mid
        else:
            a = mid + 1
    return indices[a]


@njit(cache=True)
def _walk_into(buf, state, start, n_steps, indptr, indices, cumw, weighted):
    """Fill ``buf`` with a walk; returns the number of vertices written."""
    buf[0] = start
    x = start
    for s in range(1, n_steps + 1):
        x = _step(state, x, indptr, indices, cumw, weighted)
        if x < 0:
            return s
        buf[s] = x
    return n_steps + 1


@njit(cache=True)
def sample_walks(starts, n_steps, indptr, indices, cumw, weighted, seed, epoch):
    out = np.full((starts.shape[0], n_steps + 1), -1, dtype=np.int64)
    state = np.zeros(1, dtype=np.uint64)
    for w in range(starts.shape[0]):
        _seed_state(state, seed, epoch, w)
        _walk_into(out[w], state, starts[w], n_steps, indptr, indices, cumw, weighted)
    return out


@njit(cache=True)
def rank_update(phi, d, m, weight, negs, n_neg, threshold, lam, lr, grad_d, g):
    """One ranking SGD step on rows ``d``, ``m`` and ``negs[:n_neg]``.

    Returns the step loss, or NaN if a score is not finite (rows untouched).
    """
    dim = phi.shape[1]
    s_pos = 0.0
    for k in range(dim):
        s_pos += phi[d, k] * phi[m, k]
    loss = 0.0
    any_active = False
    for j in range(n_neg):
        r = negs[j]
        s = 0.0
        for k in range(dim):
            s += phi[d, k] * phi[r, k]
        delta = s - s_pos
        if not np.isfinite(delta):
            return np.nan
        if delta > threshold:
            dc = delta if delta < CLAMP else CLAMP
            g[j] = weight / dc
            loss += weight * np.log(dc)
            any_active = True
        else:
            g[j] = 0.0

    for k in range(dim):
        grad_d[k] = 2.0 * lam * phi[d, k]
    gsum = 0.0
    if any_active:
        for j in range(n_neg):
            if g[j] != 0.0:
                r = negs[j]
                gj = g[j]
                gsum += gj
                for k in range(dim):
                    grad_d[k] += gj * (phi[r, k] - phi[m, k])

    reg = 0.0
    for j in range(n_neg):
        r = negs[j]
        gj = g[j]
        nrm = 0.0
        for k in range(dim):
            v = phi[r, k]
            nrm += v * v
            phi[r, k] = v - lr * (gj * phi[d, k] + 2.0 * lam * v)
        reg += nrm
    nd = 0.0
    nm = 0.0
    for k in range(dim):
        vm = phi[m, k]
        vd = phi[d, k]
        nm += vm * vm
        nd += vd * vd
        phi[m, k] = vm - lr * (2.0 * lam * vm - gsum * vd)
        phi[d, k] = vd - lr * grad_d[k]
    return loss + lam * (reg + nm + nd)


@njit(cache=True)
def _train_range(
    phi, starts, lo, hi, n_steps, max_order, n_dev, n_app, n_neg,
    threshold, lam, lr0, lr_min, epoch, n_epochs, seed,
    indptr, indices, cumw, weighted,
):
    state = np.zeros(1, dtype=np.uint64)
    buf = np.empty(n_steps + 1, dtype=np.int64)
    negs = np.empty(n_neg, dtype=np.int64)
    grad_d = np.empty(phi.shape[1])
    g = np.empty(n_neg)
    span = max(hi - lo, 1) * n_epochs
    loss = 0.0
    n_pairs = 0
    for w in range(lo, hi):
        _seed_state(state, seed, epoch, w)
        n = _walk_into(buf, state, starts[w], n_steps, indptr, indices, cumw, weighted)
        progress = (epoch * (hi - lo) + (w - lo)) / span
        lr = lr0 - (lr0 - lr_min) * progress
        d = buf[0]
        for order in range(1, max_order + 1):
            pos = 2 * order - 1
            if pos >= n:
                break
            for j in range(n_neg):
                negs[j] = n_dev + _below(state, n_app)
            step_loss = rank_update(phi, d, buf[pos], 1.0 / order, negs, n_neg, threshold, lam, lr, grad_d, g)
            if not np.isfinite(step_loss):
                return loss, n_pairs, w
            loss += step_loss
            n_pairs += 1
    return loss, n_pairs, -1


@njit(cache=True, parallel=True)
def _train_parallel(
    phi, starts, n_workers, n_steps, max_order, n_dev, n_app, n_neg,
    threshold, lam, lr0, lr_min, epoch, n_epochs, seed,
    indptr, indices, cumw, weighted,
):
    total = starts.shape[0]
    chunk = (total + n_workers - 1) // n_workers
    losses = np.zeros(n_workers)
    pairs = np.zeros(n_workers, dtype=np.int64)
    failed = np.full(n_workers, -1, dtype=np.int64)
    for t in prange(n_workers):
        lo = min(total, t * chunk)
        hi = min(total, lo + chunk)
        loss, n_pairs, bad = _train_range(
            phi, starts, lo, hi, n_steps, max_order, n_dev, n_app, n_neg,
            threshold, lam, lr0, lr_min, epoch, n_epochs, seed,
            indptr, indices, cumw, weighted,
        )
        losses[t] = loss
        pairs[t] = n_pairs
        failed[t] = bad
    return losses.sum(), pairs.sum(), failed.max()


def train_epoch(phi, starts, workers, *args):
    if workers <= 1:
        return _train_range(phi, starts, 0, starts.shape[0], *args)
    return _train_parallel(phi, starts, workers, *args)


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _line_range(
    emb, ctx, src, dst, lo, hi, n_neg, neg_lo, neg_hi, lr0, lr_min, epoch, n_epochs, seed, second_order
):
    """Edge-sampling SGD with uniform negatives on the opposite side.

    ``src``/``dst`` are directed arcs. With ``second_order`` the target side
    uses the context table ``ctx``; otherwise both ends live in ``emb``.
    """
    dim = emb.shape[1]
    state = np.zeros(1, dtype=np.uint64)
    err = np.empty(dim)
    span = max(hi - lo, 1) * n_epochs
    tgt = ctx if second_order else emb
    loss = 0.0
    for e in range(lo, hi):
        _seed_state(state, seed, epoch, e)
        lr = lr0 - (lr0 - lr_min) * ((epoch * (hi - lo) + (e - lo)) / span)
        u = src[e]
        for k in range(dim):
            err[k] = 0.0
        for j in range(n_neg + 1):
            if j == 0:
                v = dst[e]
                label = 1.0
            else:
                v = neg_lo[e] + _below(state, neg_hi[e] - neg_lo[e])
                label = 0.0
            s = 0.0
            for k in range(dim):
                s += emb[u, k] * tgt[v, k]
            p = _sigmoid(s)
            if label > 0:
                loss -= np.log(max(p, 1e-12))
            else:
                loss -= np.log(max(1.0 - p, 1e-12))
            gcoef = lr * (label - p)
            for k in range(dim):
                err[k] += gcoef * tgt[v, k]
                tgt[v, k] += gcoef * emb[u, k]
        for k in range(dim):
            emb[u, k] += err[k]
        if not np.isfinite(emb[u, 0]):
            return np.nan
    return loss


@njit(cache=True, parallel=True)
def _line_parallel(emb, ctx, src, dst, n_workers, n_neg, neg_lo, neg_hi, lr0, lr_min, epoch, n_epochs, seed, second_order):
    total = src.shape[0]
    chunk = (total + n_workers - 1) // n_workers
    losses = np.zeros(n_workers)
    for t in prange(n_workers):
        lo = min(total, t * chunk)
        hi = min(total, lo + chunk)
        losses[t] = _line_range(
            emb, ctx, src, dst, lo, hi, n_neg, neg_lo, neg_hi, lr0, lr_min, epoch, n_epochs, seed, second_order
        )
    return losses.sum()


def line_epoch(emb, ctx, src, dst, workers, *args):
    if workers <= 1:
        return _line_range(emb, ctx, src, dst, 0, src.shape[0], *args)
    return _line_parallel(emb, ctx, src, dst, workers, *args)
