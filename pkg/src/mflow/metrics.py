"""Evaluation: exact NLL, bits per dimension, reconstruction MSE, and
distance of generated samples to a known ground-truth manifold.

BPD here is ``nll / (D ln 2)`` with no dequantization offset, since the
synthetic data are continuous.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import SWISS_HEIGHT, SWISS_T_RANGE, Dataset, embedding_matrix
from .objective import Model, per_sample_terms, reconstruct


@dataclass
class EvalSummary:
    nll_nats: float
    bpd: float
    recon_mse: float
    manifold_dist: float | None = None

    def csv_row(self) -> str:
        fields = [self.nll_nats, self.bpd, self.recon_mse]
        cells = ["%.17g" % v for v in fields]
        cells.append("" if self.manifold_dist is None else "%.17g" % self.manifold_dist)
        return ",".join(cells)

    CSV_HEADER = "nll,bpd,recon_mse,manifold_dist"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _sharded_sum(fn, points: np.ndarray, shard: int = 4096) -> float:
    """Sum ``fn(offset, rows)`` over fixed shards; shards reduce in index order."""
    offsets = list(range(0, len(points), shard))
    chunks = [points[i:i + shard] for i in offsets]
    workers = min(_threads(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sums = list(pool.map(fn, offsets, chunks))
    else:
        sums = [fn(o, c) for o, c in zip(offsets, chunks)]
    return float(sum(sums))


def _points(data) -> np.ndarray:
    return data.points if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=np.float64))


def nll_per_sample(model: Model, x: np.ndarray) -> np.ndarray:
    nll_u, nll_v, log_det, _ = per_sample_terms(model.flow, x, model.split, model.prior_flow)
    return nll_u + nll_v - log_det


def nll(model: Model, data) -> float:
    """Mean exact negative log-likelihood in nats per sample."""
    x = _points(data)
    if x.shape[1] != model.split.D:
        raise ValueError(f"data dim {x.shape[1]} != model dim {model.split.D}")

    def shard_sum(offset, rows):
        vals = nll_per_sample(model, rows)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise FloatingPointError(f"non-finite density at row {offset + int(bad[0])}")
        return vals.sum()

    return _sharded_sum(shard_sum, x) / len(x)


def bpd(nll_nats: float, D: int) -> float:
    if D < 1:
        raise ValueError("D must be >= 1")
    return nll_nats / (D * math.log(2.0))


def recon_mse(model: Model, data) -> float:
    """Mean over rows of ``|x - x_rec|^2 / D``."""
    x = _points(data)
    if x.shape[1] != model.split.D:
        raise ValueError(f"data dim {x.shape[1]} != model dim {model.split.D}")

    def shard_sum(offset, rows):
        err = rows - reconstruct(model.flow, rows, model.split)
        return np.mean(err * err, axis=1).sum()

    return _sharded_sum(shard_sum, x) / len(x)


def _decode(models: list[Model], u: np.ndarray) -> np.ndarray:
    from .training import lift_through_stages

    return lift_through_stages(models, u)


def manifold_nll_per_sample(models, data, h: float = 1e-5) -> np.ndarray:
    """Negative log density of each point's projection on the learned manifold.

    With ``u`` the final manifold coordinates and ``g`` the decoder
    ``u -> x`` (zero-padded inverses through every stage), the density on
    the manifold is ``N(u) / sqrt(det(J_g^T J_g))``.  ``J_g`` comes from
    central differences with step ``h``.  Unlike ``-log N(u)`` alone this
    does not reward shrinking the latent, so it can compare models whose
    manifold coordinates live at different scales.  Two-block models use
    ``h(u)`` and its log-det in place of ``u``.
    """
    from .training import project_through_stages

    models = [models] if isinstance(models, Model) else list(models)
    x = _points(data)
    u = project_through_stages(models, x)
    last = models[-1]
    d = u.shape[1]
    jac = np.empty((len(u), x.shape[1], d))
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        jac[:, :, j] = (_decode(models, u + step) - _decode(models, u - step)) / (2 * h)
    _, logdet_g = np.linalg.slogdet(np.einsum("nij,nik->njk", jac, jac))
    if last.prior_flow is not None:
        w, ld_h = last.prior_flow.forward(u)
    else:
        w, ld_h = u, 0.0
    nll_u = 0.5 * np.sum(w * w, axis=1) + 0.5 * d * math.log(2 * math.pi) - ld_h
    return nll_u + 0.5 * logdet_g


def manifold_nll(models, data) -> float:
    """Mean of :func:`manifold_nll_per_sample` in nats."""
    return float(np.mean(manifold_nll_per_sample(models, data)))


def _swiss_roll_distance(x: np.ndarray) -> np.ndarray:
    """Distance to the swiss-roll surface via a grid search in t refined by Newton steps."""
    lo, hi = SWISS_T_RANGE
    grid = np.linspace(lo, hi, 2048)
    px, py, pz = x[:, 0:1], x[:, 1], x[:, 2:3]
    sq = (px - grid * np.cos(grid)) ** 2 + (pz - grid * np.sin(grid)) ** 2
    t = grid[np.argmin(sq, axis=1)]
    a, c = x[:, 0], x[:, 2]
    for _ in range(20):
        ct, st = np.cos(t), np.sin(t)
        rx, rz = t * ct - a, t * st - c
        dx, dz = ct - t * st, st + t * ct
        ddx, ddz = -2 * st - t * ct, 2 * ct - t * st
        grad = rx * dx + rz * dz
        hess = dx * dx + dz * dz + rx * ddx + rz * ddz
        step = np.where(hess > 0, grad / np.where(hess > 0, hess, 1.0), 0.0)
        t = np.clip(t - step, lo, hi)
    planar = np.sqrt((t * np.cos(t) - a) ** 2 + (t * np.sin(t) - c) ** 2)
    dy = py - np.clip(py, 0.0, SWISS_HEIGHT)
    return np.sqrt(planar**2 + dy**2)


def _embedded_gaussian_distance(x: np.ndarray, d: int, D: int) -> np.ndarray:
    """Gauss-Newton projection onto ``u -> tanh(A u)``, started from the pseudo-inverse."""
    A = embedding_matrix(d, D)
    u = np.clip(x, -1 + 1e-9, 1 - 1e-9)
    u = np.arctanh(u) @ np.linalg.pinv(A).T
    for _ in range(50):
        y = np.tanh(u @ A.T)
        r = y - x
        J = (1 - y * y)[:, :, None] * A[None, :, :]
        JtJ = np.einsum("nij,nik->njk", J, J) + 1e-12 * np.eye(d)
        Jtr = np.einsum("nij,ni->nj", J, r)
        u = u - np.linalg.solve(JtJ, Jtr[..., None])[..., 0]
    return np.linalg.norm(np.tanh(u @ A.T) - x, axis=1)


def manifold_distance_per_point(samples, descriptor: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if descriptor == "unit-circle":
        return np.abs(np.linalg.norm(x, axis=1) - 1.0)
    if descriptor == "swiss-roll":
        return _swiss_roll_distance(x)
    if descriptor and descriptor.startswith("embedded-gaussian:"):
        _, d, D = descriptor.split(":")
        return _embedded_gaussian_distance(x, int(d), int(D))
    raise ValueError(f"unknown manifold descriptor {descriptor!r}")


def manifold_distance(samples, descriptor: str) -> float:
    """Mean distance of ``samples`` to the named ground-truth manifold."""
    dist = manifold_distance_per_point(samples, descriptor)
    return float(dist.mean()) if dist.size else 0.0


def evaluate(model: Model, data, samples=None, descriptor: str | None = None) -> EvalSummary:
    value = nll(model, data)
    dist = None
    if samples is not None and descriptor is not None:
        dist = manifold_distance(samples, descriptor)
    return EvalSummary(value, bpd(value, model.split.D), recon_mse(model, data), dist)
