"""Scoring/reconstruction dual network, the progressive-subsampling driver and
the hard-selection baseline.

Data flow for one batch ``x`` (rows are samples)::

    s      = mean over rows of scorer(x)             per-measurement score in (0, 2)
    s_bar  = a_t * s + (1 - a_t) * s_bar_prev        moving-average score
    x_hat  = reconstructor(x * mask_e * s_bar)
    loss   = mean((x_hat - x) ** 2)

Gradients of the loss reach both networks; the scorer sees them through the
score product and the batch mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nas import ArchSpec, SearchSpace, Trial
from .nn import AdamState, Mlp, ShapeError, backward, forward, l2_loss, l2_loss_grad
from .subsample import (
    RemovalSet,
    RfeSchedule,
    ScoreEma,
    alpha,
    anneal_mask,
    select_removals,
)

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    """A trial produced a non-finite loss."""


@dataclass
class DualModel:
    scorer: Mlp
    reconstructor: Mlp
    arch: ArchSpec

    def __post_init__(self):
        N = self.scorer.n_in
        if not (self.scorer.n_out == N == self.reconstructor.n_in == self.reconstructor.n_out):
            raise ShapeError(
                f"scorer {self.scorer.n_in}->{self.scorer.n_out} and reconstructor "
                f"{self.reconstructor.n_in}->{self.reconstructor.n_out} widths disagree"
            )
        if self.scorer.layers[-1].activation != "scaled_sigmoid2":
            raise ValueError("scorer must end in scaled_sigmoid2")

    @classmethod
    def build(cls, N, arch, rng, hidden_activation="relu"):
        scorer = Mlp.build(
            [N, *arch.hidden_widths("scorer"), N], rng,
            hidden_activation=hidden_activation, output_activation="scaled_sigmoid2",
            dropout=arch.dropout,
        )
        reconstructor = Mlp.build(
            [N, *arch.hidden_widths("reconstructor"), N], rng,
            hidden_activation=hidden_activation, output_activation="linear",
            dropout=arch.dropout,
        )
        return cls(scorer, reconstructor, arch)

    @property
    def N(self):
        return self.scorer.n_in

    def copy(self):
        return DualModel(self.scorer.copy(), self.reconstructor.copy(), self.arch)


def score_batch(model, batch):
    """Per-measurement score: batch mean of the scorer's per-sample outputs."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.N:
        raise ShapeError(f"batch {batch.shape} does not match N={model.N}")
    return forward(model.scorer, batch)[0].mean(axis=0)


def blend_score(s, prior, a):
    """``a * s + (1 - a) * prior`` with the endpoints returned exactly."""
    if a == 1.0:
        return s.copy()
    if a == 0.0:
        return np.array(prior, dtype=np.float64, copy=True)
    return a * s + (1.0 - a) * prior


def reconstruct(reconstructor, x, mask, score):
    """``reconstructor(x * mask * score)`` in eval mode."""
    return forward(reconstructor, np.asarray(x) * (np.asarray(mask) * score))[0]


@dataclass
class PipelinePass:
    loss: float
    score: np.ndarray
    scorer_grads: list
    reconstructor_grads: list


def pipeline_pass(model, x, mask, prior, a, train_mode=False, rng=None, need_grads=True):
    """Forward (and backward) through scorer, score blend, mask and reconstructor."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.N:
        raise ShapeError(f"batch {x.shape} does not match N={model.N}")
    s_rows, s_tape = forward(model.scorer, x, train_mode, rng)
    s_bar = blend_score(s_rows.mean(axis=0), prior, a)
    w = mask * s_bar
    x_hat, r_tape = forward(model.reconstructor, x * w, train_mode, rng)
    loss = l2_loss(x_hat, x)
    if not need_grads:
        return PipelinePass(loss, s_bar, None, None)
    r_grads, d_in = backward(model.reconstructor, r_tape, l2_loss_grad(x_hat, x))
    d_score = (d_in * x).sum(axis=0) * mask * a
    d_rows = np.broadcast_to(d_score / x.shape[0], s_rows.shape)
    s_grads, _ = backward(model.scorer, s_tape, d_rows)
    return PipelinePass(loss, s_bar, s_grads, r_grads)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(model, x, mask_e, prior, a, states, batch_size=1500, rng=None):
    """One pass over ``x`` in shuffled batches with an Adam step per batch.

    Returns ``(mean batch loss, score after the last batch)``.
    ``states`` is the ``(scorer, reconstructor)`` pair of Adam states.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    losses, s_bar = [], None
    for idx in _batches(x.shape[0], batch_size, rng):
        p = pipeline_pass(model, x[idx], mask_e, prior, a, train_mode=True, rng=rng)
        if not math.isfinite(p.loss):
            raise TrainingFailure(f"non-finite training loss {p.loss}")
        model.scorer.step(p.scorer_grads, states[0])
        model.reconstructor.step(p.reconstructor_grads, states[1])
        losses.append(p.loss)
        s_bar = p.score
    return float(np.mean(losses)), s_bar


def evaluate_mse(reconstructor, mask, score, x):
    """MSE between ``reconstructor(mask * x * score)`` and ``x`` over all entries."""
    if isinstance(reconstructor, DualModel):
        reconstructor = reconstructor.reconstructor
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != reconstructor.n_in or np.shape(mask) != (x.shape[1],):
        raise ShapeError(f"data {x.shape}, mask {np.shape(mask)}, net width {reconstructor.n_in}")
    return l2_loss(reconstruct(reconstructor, x, mask, np.asarray(score)), x)


# ----------------------------------------------------------------------------
# progressive subsampling driver

@dataclass
class StepResult:
    step: int
    arch: ArchSpec
    removal: RemovalSet
    train_curve: list
    val_curve: list
    mask: np.ndarray
    ema: ScoreEma
    model: DualModel | None = None
    status: str = "ok"


@dataclass
class ProsubResult:
    mask: np.ndarray
    ema: ScoreEma
    model: DualModel
    steps: list = field(default_factory=list)

    @property
    def selected(self):
        return tuple(int(i) for i in np.flatnonzero(self.mask == 1.0))

    @property
    def train_trace(self):
        return [v for s in self.steps for v in s.train_curve]

    @property
    def final_val_loss(self):
        return self.steps[-1].val_curve[-1]


@dataclass
class WarmStart:
    model: DualModel
    mask: np.ndarray
    score: np.ndarray


def run_prosub(train_x, val_x, schedule, arch=None, tuner=None, warm_start=None, seed=0,
               batch_size=1500, lr=1e-3, anneal_mode="progressive", use_average=True,
               keep_models=False):
    """Progressive subsampling over ``schedule.T`` steps.

    Exactly one of ``arch`` (fixed architecture) and ``tuner`` (greedy search)
    is used; with a tuner each step trains the proposed architecture and its
    curves are recorded as a trial. A proposal that differs from the current
    architecture starts from fresh weights. ``warm_start`` seeds the
    networks, mask and score from a previous run.
    """
    if (arch is None) == (tuner is None):
        raise ValueError("pass exactly one of arch or tuner")
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    N = train_x.shape[1]
    rng = np.random.default_rng(seed)

    if warm_start is not None:
        model = warm_start.model.copy()
        mask = np.array(warm_start.mask, dtype=np.float64)
        prior = np.array(warm_start.score, dtype=np.float64)
    else:
        model = None
        mask = np.ones(N)
        prior = np.zeros(N)
    active = int(np.count_nonzero(mask == 1.0))
    if active != schedule.N:
        raise ValueError(f"schedule expects {schedule.N} active measurements, mask has {active}")
    if tuner is not None and warm_start is not None and tuner.start is None and not tuner.history:
        tuner.start = model.arch

    ema = ScoreEma(prior, 0, schedule.T)
    states = None
    steps = []
    for t in range(1, schedule.T + 1):
        D_t = schedule.removal_counts[t - 1]
        removal = select_removals(ema, mask, D_t, step=t) if D_t else RemovalSet(t, ())
        a = alpha(t, schedule.T) if use_average else 1.0
        step_arch = tuner.propose_next() if tuner is not None else arch
        while True:
            if model is None or step_arch != model.arch:
                model = DualModel.build(N, step_arch, rng)
                states = None
            if states is None:
                states = (AdamState.for_params(model.scorer.parameters(), lr=lr),
                          AdamState.for_params(model.reconstructor.parameters(), lr=lr))
            train_curve, val_curve = [], []
            s_bar, mask_e = ema.values, mask
            status = "ok"
            try:
                for e in range(1, schedule.E + 1):
                    mask_e = anneal_mask(mask, removal, e, schedule.E_d, anneal_mode)
                    loss, s_bar = train_epoch(model, train_x, mask_e, ema.values, a, states,
                                              batch_size, rng)
                    val = evaluate_mse(model.reconstructor, mask_e, s_bar, val_x)
                    if not math.isfinite(val):
                        raise TrainingFailure(f"non-finite validation loss at epoch {e}")
                    train_curve.append(loss)
                    val_curve.append(val)
            except (TrainingFailure, FloatingPointError) as exc:
                status = "failed"
                log.warning("step %d with %s failed: %s", t, step_arch, exc)
            if tuner is not None:
                tuner.record_trial(Trial(step_arch, t, train_curve, val_curve, status))
            if status == "ok":
                break
            # a failed trial falls back once to the best architecture seen so far
            fallback = tuner.best if tuner is not None else None
            if fallback is None or fallback == step_arch:
                raise TrainingFailure(f"step {t} with {step_arch} failed")
            step_arch, model, states = fallback, None, None
        mask = mask_e
        ema = ScoreEma(np.array(s_bar, dtype=np.float64), t, schedule.T)
        steps.append(StepResult(t, step_arch, removal, train_curve, val_curve, mask.copy(), ema,
                                model.copy() if keep_models else None))
        log.info("step %d/%d arch=%s removed=%d val=%.5g", t, schedule.T, step_arch,
                 len(removal.indices), val_curve[-1])
    return ProsubResult(mask, ema, model, steps)


# ----------------------------------------------------------------------------
# hard-selection baseline

def keep_top(w, M):
    """Indices of the ``M`` largest entries, ties resolved toward lower index."""
    order = np.argsort(-np.asarray(w), kind="stable")
    return tuple(sorted(int(i) for i in order[:M]))


@dataclass
class SarduSelector:
    selector_net: Mlp
    M: int

    def __post_init__(self):
        if not 1 <= self.M < self.selector_net.n_out:
            raise ValueError(f"M={self.M} outside 1..{self.selector_net.n_out - 1}")


@dataclass
class SarduPass:
    loss: float
    selected: tuple
    weights: np.ndarray
    selector_grads: list
    reconstructor_grads: list


def sardu_forward(selector, reconstructor, batch, train_mode=False, rng=None, need_grads=False):
    """Weights from the selector, the ``N - M`` smallest clamped to zero, then
    reconstruction from ``x * w``."""
    x = np.ascontiguousarray(batch, dtype=np.float64)
    N = selector.selector_net.n_in
    if x.ndim != 2 or x.shape[1] != N:
        raise ShapeError(f"batch {x.shape} does not match N={N}")
    w_rows, w_tape = forward(selector.selector_net, x, train_mode, rng)
    w = w_rows.mean(axis=0)
    selected = keep_top(w, selector.M)
    keep = np.zeros(N)
    keep[list(selected)] = 1.0
    wc = w * keep
    x_hat, r_tape = forward(reconstructor, x * wc, train_mode, rng)
    loss = l2_loss(x_hat, x)
    if not need_grads:
        return SarduPass(loss, selected, wc, None, None)
    r_grads, d_in = backward(reconstructor, r_tape, l2_loss_grad(x_hat, x))
    d_w = (d_in * x).sum(axis=0) * keep
    s_grads, _ = backward(selector.selector_net, w_tape,
                          np.broadcast_to(d_w / x.shape[0], w_rows.shape))
    return SarduPass(loss, selected, wc, s_grads, r_grads)


@dataclass
class SarduResult:
    selector: SarduSelector
    reconstructor: Mlp
    weights: np.ndarray
    train_curve: list
    val_curve: list
    selections: list

    @property
    def selected(self):
        return tuple(int(i) for i in np.flatnonzero(self.weights != 0.0))

    @property
    def mask(self):
        m = np.zeros(self.weights.shape)
        m[list(self.selected)] = 1.0
        return m


def sardu_arch(space_units=None):
    """The baseline's fixed shape: three layers per net, widths nearest 1063/781, dropout 0.2."""
    space = SearchSpace(units=space_units) if space_units else SearchSpace()
    d = space.default()
    return ArchSpec(2, 2, d.scorer_units, d.reconstructor_units, 0.2)


def train_sardu(train_x, val_x, M, arch, epochs=200, batch_size=1500, lr=1e-3, seed=0):
    """Train the hard-selection baseline; validation uses the last batch's clamped weights."""
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    N = train_x.shape[1]
    rng = np.random.default_rng(seed)
    selector_net = Mlp.build([N, *arch.hidden_widths("scorer"), N], rng,
                             output_activation="scaled_sigmoid2", dropout=arch.dropout)
    recon = Mlp.build([N, *arch.hidden_widths("reconstructor"), N], rng,
                      output_activation="linear", dropout=arch.dropout)
    selector = SarduSelector(selector_net, M)
    states = (AdamState.for_params(selector_net.parameters(), lr=lr),
              AdamState.for_params(recon.parameters(), lr=lr))
    train_curve, val_curve, selections = [], [], []
    wc = None
    for _ in range(epochs):
        losses = []
        for idx in _batches(train_x.shape[0], batch_size, rng):
            p = sardu_forward(selector, recon, train_x[idx], True, rng, need_grads=True)
            if not math.isfinite(p.loss):
                raise TrainingFailure(f"non-finite training loss {p.loss}")
            selector_net.step(p.selector_grads, states[0])
            recon.step(p.reconstructor_grads, states[1])
            losses.append(p.loss)
            wc = p.weights
            selections.append(p.selected)
        train_curve.append(float(np.mean(losses)))
        keep = (wc != 0.0).astype(np.float64)
        val_curve.append(evaluate_mse(recon, keep, wc, val_x))
    return SarduResult(selector, recon, wc, train_curve, val_curve, selections)
