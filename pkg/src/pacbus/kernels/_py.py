"""Pure numpy backend: vectorized over (parameter vector, task) pairs."""

from __future__ import annotations

import numpy as np

from ..models import LossScaling, ModelSpec, batch_loss_grad

CHUNK = 4096


def project_rows(thetas: np.ndarray, radius: float) -> np.ndarray:
    if not np.isfinite(radius):
        return thetas
    norms = np.sqrt(np.einsum("bd,bd->b", thetas, thetas))
    over = norms > radius
    if np.any(over):
        thetas[over] *= (radius / norms[over])[:, None]
        for i in np.flatnonzero(over):
            while np.sqrt(thetas[i] @ thetas[i]) > radius:
                thetas[i] = np.nextafter(thetas[i], 0.0)
    return thetas


def _spec_for(widths, bias, act) -> ModelSpec:
    if bool(bias) != bool(act):
        raise ValueError("backends support linear (no bias, no activation) or ELU-MLP with biases")
    return ModelSpec("mlp" if act else "linear", tuple(int(w) for w in widths))


def _adapt_chunk(spec, thetas, tasks, Xtr, Ytr, step_index, lrs, radius, scaling):
    for s in range(len(lrs)):
        idx = step_index[tasks, s]
        full = idx < 0
        grad = np.empty_like(thetas)
        if np.any(full):
            rows = np.flatnonzero(full)
            t = tasks[rows]
            _, _, grad[rows] = batch_loss_grad(spec, thetas[rows], Xtr[t], Ytr[t], scaling)
        if not np.all(full):
            rows = np.flatnonzero(~full)
            t, j = tasks[rows], idx[rows]
            X1 = Xtr[t, j][:, None, :]
            Y1 = Ytr[t, j][:, None]
            _, _, grad[rows] = batch_loss_grad(spec, thetas[rows], X1, Y1, scaling)
        thetas = project_rows(thetas - lrs[s] * grad, radius)
    return thetas


def adapt_eval(thetas, theta_idx, task_idx, Xtr, Ytr, Xev, Yev, widths, bias, act,
               step_index, lrs, radius, m_f, M_f, want_grad=False, nthreads=1, return_adapted=False):
    """Adapt ``thetas[theta_idx[p]]`` on task ``task_idx[p]`` and evaluate it.

    Each of the T steps uses ``step_index[task, t]``: a sample index for an
    SGD step or -1 for a full-batch GD step, followed by projection onto the
    ball of ``radius`` (inf disables it).  Returns mean scaled loss and
    accuracy on the evaluation split per pair, plus the loss gradient at the
    adapted point when ``want_grad``.
    """
    spec = _spec_for(widths, bias, act)
    scaling = LossScaling(m_f, M_f)
    B = len(theta_idx)
    loss = np.empty(B)
    acc = np.empty(B)
    grad = np.empty((B, thetas.shape[1])) if want_grad else None
    adapted = np.empty((B, thetas.shape[1])) if return_adapted else None
    for lo in range(0, B, CHUNK):
        hi = min(B, lo + CHUNK)
        tasks = task_idx[lo:hi]
        th = thetas[theta_idx[lo:hi]].astype(np.float64, copy=True)
        th = _adapt_chunk(spec, th, tasks, Xtr, Ytr, step_index, lrs, radius, scaling)
        l, a, g = batch_loss_grad(spec, th, Xev[tasks], Yev[tasks], scaling, want_grad)
        loss[lo:hi] = l
        acc[lo:hi] = a
        if want_grad:
            grad[lo:hi] = g
        if return_adapted:
            adapted[lo:hi] = th
    if return_adapted:
        return loss, acc, grad, adapted
    return loss, acc, grad
