"""Adam, minibatch pixel-rejection training, and hierarchical stage-wise training.

Training is single-threaded and bit-deterministic given the model's initial
parameters, the data and the run seed.  The minibatch order comes from a
stream split off the run seed (tag ``"shuffle"``), so it does not depend on
how the parameters were initialized.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .flows import ActNorm, FlowStack, glow_specs
from .objective import LatentSplit, LossConfig, Model, pixel_rejection_loss
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A non-finite loss or gradient stopped training."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None,
                 stage: int | None = None):
        super().__init__(message)
        self.epoch, self.batch, self.stage = epoch, batch, stage


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 100.0


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def from_config(cls, cfg: OptimConfig) -> "OptimState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, s: OptimState) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``s`` and returns the new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"params shape {params.shape} != grads shape {grads.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise DivergenceError(f"non-finite gradient at parameter index {int(bad[0])}")
    if s.m is None:
        s.m = np.zeros_like(params)
        s.v = np.zeros_like(params)
    if s.m.shape != params.shape:
        raise ValueError("optimizer state does not match the parameter count")
    s.step += 1
    s.m = s.beta1 * s.m + (1 - s.beta1) * grads
    s.v = s.beta2 * s.v + (1 - s.beta2) * grads * grads
    m_hat = s.m / (1 - s.beta1**s.step)
    v_hat = s.v / (1 - s.beta2**s.step)
    return params - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


def clip_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(grads * grads)))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    nll: float
    bpd: float
    recon_mse: float
    wall_time: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> EpochRecord | None:
        return self.records[-1] if self.records else None


@dataclass(frozen=True)
class FlowSpec:
    """Architecture of one flow: ``steps`` x (actnorm, invertible linear, coupling)."""

    steps: int = 4
    hidden: tuple[int, ...] = (32, 32)
    prior_steps: int = 2

    def __post_init__(self):
        if self.steps < 0 or self.prior_steps < 0:
            raise ValueError("step counts must be >= 0")


def build_model(spec: FlowSpec, D: int, d: int, seed: int, variant: str = "single_block") -> Model:
    split = LatentSplit(D, d)
    flow = FlowStack.from_specs(glow_specs(D, spec.steps, spec.hidden), D, seed=derive_seed(seed, "flow"))
    prior = None
    if variant == "two_block":
        prior = FlowStack.from_specs(glow_specs(d, spec.prior_steps, spec.hidden), d,
                                     seed=derive_seed(seed, "prior"))
    return Model(flow, split, prior)


def data_init(model: Model, x: np.ndarray) -> None:
    """Data-dependent actnorm initialization on one batch, layer by layer."""
    for flow, inputs in ((model.flow, x), (model.prior_flow, None)):
        if flow is None:
            continue
        if inputs is None:
            inputs = model.flow.forward(x)[0][:, : model.split.d]
        h = inputs
        for layer in flow.layers:
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize(h)
            h, _ = layer.forward(h)


class _Tracer:
    """Keeps parameter leaves on one tape and rolls back per-batch nodes."""

    def __init__(self, model: Model):
        self.model = model
        self.tape = ad.Tape()
        self.f_params, leaves = model.flow.trace_params(self.tape)
        self.h_params = None
        if model.prior_flow is not None:
            self.h_params, more = model.prior_flow.trace_params(self.tape)
            leaves = leaves + more
        self.leaves = leaves
        self.mark = self.tape.watermark()

    def loss_and_grad(self, x: np.ndarray, cfg: LossConfig):
        self.tape.rollback(self.mark)
        m = self.model
        loss, parts = pixel_rejection_loss(m.flow, x, m.split, cfg, m.prior_flow, self.f_params, self.h_params)
        loss.backward()
        grads = np.concatenate([v.adjoint.ravel() for v in self.leaves]) if self.leaves else np.zeros(0)
        return float(loss.value), parts, grads


def batch_loss_and_grad(model: Model, x: np.ndarray, cfg: LossConfig):
    """Loss, parts and flat gradient (in ``model.get_flat()`` order) for one batch."""
    return _Tracer(model).loss_and_grad(np.atleast_2d(x), cfg)


def train_single_step(model: Model, data, cfg: LossConfig, epochs: int, batch: int = 64, seed: int = 0,
                      optim: OptimConfig | None = None, state: OptimState | None = None,
                      max_seconds: float | None = None) -> TrainReport:
    """Minimize the batch-mean pixel-rejection loss over shuffled minibatches.

    The model is updated in place.  The report holds one record per epoch
    with sample-weighted means over that epoch's batches.

    ``max_seconds`` caps wall-clock time: no epoch starts unless it is
    expected (from the slowest epoch so far) to finish within the budget.
    A capped run is no longer a pure function of its inputs.
    """
    x_all = data.points if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, D = x_all.shape
    if D != model.split.D:
        raise ValueError(f"data dim {D} != model dim {model.split.D}")
    if not 1 <= batch <= n:
        raise ValueError(f"batch must be in [1, {n}], got {batch}")
    if (model.prior_flow is not None) != (cfg.variant == "two_block"):
        raise ValueError(f"loss variant {cfg.variant!r} does not match the model")
    optim = optim or OptimConfig()
    state = state or OptimState.from_config(optim)
    report = TrainReport()
    if epochs <= 0:
        return report

    shuffle = SplitMix64(derive_seed(seed, "shuffle"))
    tracer = None
    theta = model.get_flat()
    t0 = time.perf_counter()
    slowest = 0.0
    for epoch in range(1, epochs + 1):
        elapsed = time.perf_counter() - t0
        if max_seconds is not None and elapsed + slowest > max_seconds:
            log.info("time budget of %.1f s reached after %d epochs", max_seconds, epoch - 1)
            break
        order = shuffle.permutation(n)
        tot = {"loss": 0.0, "nll": 0.0, "mse": 0.0}
        for b, start in enumerate(range(0, n, batch)):
            xb = x_all[order[start:start + batch]]
            try:
                if tracer is None:
                    data_init(model, xb)
                    theta = model.get_flat()
                    tracer = _Tracer(model)
                loss, parts, grads = tracer.loss_and_grad(xb, cfg)
            except (ValueError, FloatingPointError) as exc:
                # layer guards (zero scale, singular weight, log domain) firing mid-run
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from None
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            try:
                theta = adam_step(theta, clip_global_norm(grads, optim.clip), state)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from None
            # leaves alias the model arrays, so this also updates the tape
            model.set_flat(theta)
            k = len(xb)
            tot["loss"] += loss * k
            tot["nll"] += parts.nll * k
            tot["mse"] += parts.recon_mse * k
        mean_nll = tot["nll"] / n
        rec = EpochRecord(epoch, tot["loss"] / n, mean_nll, mean_nll / (D * math.log(2.0)),
                          tot["mse"] / n, time.perf_counter() - t0)
        log.info("epoch %d loss %.6g nll %.6g mse %.3g", rec.epoch, rec.loss, rec.nll, rec.recon_mse)
        report.records.append(rec)
        slowest = max(slowest, rec.wall_time - elapsed)
    return report


@dataclass
class Stage:
    manifold_dim: int
    epochs: int
    loss: LossConfig = field(default_factory=LossConfig)
    flow: FlowSpec = field(default_factory=FlowSpec)
    input_dim: int | None = None


@dataclass
class StagePlan:
    stages: list[Stage]

    def validate(self, data_dim: int) -> None:
        if not self.stages:
            raise ValueError("a stage plan needs at least one stage")
        prev = data_dim
        for k, st in enumerate(self.stages, start=1):
            if st.input_dim is not None and st.input_dim != prev:
                raise ValueError(f"stage {k}: input_dim {st.input_dim} does not match previous dim {prev}")
            if not 1 <= st.manifold_dim < prev:
                raise ValueError(f"stage {k}: manifold_dim {st.manifold_dim} must satisfy 1 <= d < {prev}")
            prev = st.manifold_dim

    def input_dims(self, data_dim: int) -> list[int]:
        dims = [data_dim] + [st.manifold_dim for st in self.stages]
        return dims[:-1]


def stage_seed(seed: int, k: int) -> int:
    """Seed of stage ``k`` (0-based); stage 0 reuses the run seed."""
    return seed if k == 0 else derive_seed(seed, f"stage{k}")


def project(model: Model, x: np.ndarray) -> np.ndarray:
    z, _ = model.flow.forward(x)
    return z[:, : model.split.d]


def project_through_stages(models: list[Model], x) -> np.ndarray:
    """Push ``x`` through each stage's flow, keeping its manifold coordinates."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    squeeze = np.ndim(x) == 1
    for k, m in enumerate(models, start=1):
        if h.shape[1] != m.split.D:
            raise ValueError(f"stage {k} expects dim {m.split.D}, got {h.shape[1]}")
        h = project(m, h)
    return h[0] if squeeze else h


def lift_through_stages(models: list[Model], u) -> np.ndarray:
    """Inverse of :func:`project_through_stages` with zero-padded off-manifold parts."""
    from .objective import pad_latent

    h = np.atleast_2d(np.asarray(u, dtype=np.float64))
    for m in reversed(models):
        h, _ = m.flow.inverse(pad_latent(h, m.split.D))
    return h


def train_hierarchical(plan: StagePlan, data, seed: int = 0, batch: int = 64,
                       optim: OptimConfig | None = None, on_stage_done=None):
    """Train each stage on the frozen projections of the previous stages.

    ``on_stage_done(k, model, report)`` runs after stage ``k`` (1-based)
    finishes and before the next begins.
    """
    x = data.points if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=np.float64))
    plan.validate(x.shape[1])
    models, reports = [], []
    h = x
    for k, st in enumerate(plan.stages):
        s = stage_seed(seed, k)
        model = build_model(st.flow, h.shape[1], st.manifold_dim, s, st.loss.variant)
        try:
            rep = train_single_step(model, h, st.loss, st.epochs, min(batch, len(h)), s, optim)
        except DivergenceError as exc:
            raise DivergenceError(f"stage {k + 1}: {exc}", exc.epoch, exc.batch, k + 1) from None
        models.append(model)
        reports.append(rep)
        if on_stage_done is not None:
            on_stage_done(k + 1, model, rep)
        h = project(model, h)
    return models, reports
