"""Mask lifecycle for progressive recursive feature elimination.

Covers the removal-count schedule, lowest-score selection among still-active
measurements, the per-epoch linear mask ramp, and the exponentially averaged
per-measurement score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


def alpha(t, T):
    """Moving-average coefficient (T - t) / (T - 1)."""
    if T < 2:
        raise ScheduleError(f"need T >= 2, got {T}")
    if not 1 <= t <= T:
        raise ScheduleError(f"step {t} outside 1..{T}")
    return (T - t) / (T - 1)


@dataclass
class ScoreEma:
    values: np.ndarray
    step: int
    T: int

    @classmethod
    def zeros(cls, N, T):
        return cls(np.zeros(N), 0, T)


def ema_update(ema, s_t, t=None, *, use_average=True):
    """Blend ``s_t`` into ``ema`` at step ``t`` (defaults to ``ema.step + 1``).

    ``use_average=False`` is the ablation where the blended score is just
    ``s_t``.
    """
    s_t = np.asarray(s_t, dtype=np.float64)
    if s_t.shape != ema.values.shape:
        raise ValueError(f"score length {s_t.shape} vs ema length {ema.values.shape}")
    if t is None:
        t = ema.step + 1
    if t != ema.step + 1:
        raise ScheduleError(f"ema at step {ema.step} cannot jump to step {t}")
    a = alpha(t, ema.T) if use_average else 1.0
    if a == 1.0:
        values = s_t.copy()
    elif a == 0.0:
        values = ema.values.copy()
    else:
        values = a * s_t + (1.0 - a) * ema.values
    return ScoreEma(values, t, ema.T)


def removal_counts(N, M, T, T1):
    """Per-step removal counts D_1..D_T.

    Zero before ``T1``; the ``N - M`` removals are spread evenly over steps
    ``T1..T`` with the remainder going to the earliest steps.
    """
    if M >= N:
        raise ScheduleError(f"target M={M} must be below N={N}")
    if M < 1:
        raise ScheduleError(f"target M={M} must be positive")
    if not 1 <= T1 <= T:
        raise ScheduleError(f"need 1 <= T1 <= T, got T1={T1}, T={T}")
    steps = T - T1 + 1
    base, extra = divmod(N - M, steps)
    counts = [0] * (T1 - 1)
    counts += [base + 1 if i < extra else base for i in range(steps)]
    return counts


@dataclass
class RfeSchedule:
    """Step structure of one run.

    ``N`` counts the measurements active at the start of the run, so a
    warm-started stage uses the previous target as its ``N``. ``warm_start``
    admits ``T1 == 1`` (no score-learning stage) and ``single_shot`` admits
    ``T1 == T`` (all removals in the last step).
    """

    N: int
    M: int
    T: int
    T1: int
    E: int = 200
    E_d: int = 20
    warm_start: bool = False
    single_shot: bool = False
    removal_counts: list = field(init=False)

    def __post_init__(self):
        lo = 1 if self.warm_start else 2
        hi_ok = self.T1 <= self.T if self.single_shot else self.T1 < self.T
        if not (self.T1 >= lo and hi_ok):
            raise ScheduleError(
                f"inadmissible T1={self.T1}, T={self.T} "
                f"(warm_start={self.warm_start}, single_shot={self.single_shot})"
            )
        if self.T < 2:
            raise ScheduleError(f"need T >= 2, got {self.T}")
        if not 1 <= self.E_d or not 2 * self.E_d < self.E:
            raise ScheduleError(f"need 1 <= E_d < E/2, got E_d={self.E_d}, E={self.E}")
        self.removal_counts = removal_counts(self.N, self.M, self.T, self.T1)


@dataclass(frozen=True)
class RemovalSet:
    step: int
    indices: tuple


def active_count(mask):
    return int(np.count_nonzero(np.asarray(mask) == 1.0))


def select_removals(scores, mask, D_t, step=0):
    """The ``D_t`` active measurements (mask == 1) with the lowest scores.

    Ties break toward the lower index. ``scores`` may be a :class:`ScoreEma`.
    """
    values = scores.values if isinstance(scores, ScoreEma) else np.asarray(scores)
    mask = np.asarray(mask)
    if values.shape != mask.shape:
        raise ValueError(f"scores {values.shape} vs mask {mask.shape}")
    active = np.flatnonzero(mask == 1.0)
    if D_t > active.size:
        raise ScheduleError(f"cannot remove {D_t} of {active.size} active measurements")
    if D_t <= 0:
        return RemovalSet(step, ())
    # stable sort keeps index order among equal scores
    order = np.argsort(values[active], kind="stable")
    return RemovalSet(step, tuple(int(i) for i in active[order[:D_t]]))


def anneal_mask(base, removal, e, E_d, mode="progressive"):
    """Mask for epoch ``e`` (1-based) of a step removing ``removal``.

    Removed entries hold at their base value until ``e = E_d`` and then ramp
    linearly, reaching 0 at ``e = 2 * E_d``. ``mode="instant"`` is the
    ablation without the ``1 / E_d`` divisor, which drops them to 0 at
    ``e = E_d + 1``.
    """
    out = np.array(base, dtype=np.float64, copy=True)
    idx = list(removal.indices if isinstance(removal, RemovalSet) else removal)
    if not idx:
        return out
    if mode == "progressive":
        drop = (e - E_d) / E_d if e >= E_d else 0.0
    elif mode == "instant":
        drop = float(e - E_d) if e >= E_d else 0.0
    else:
        raise ValueError(f"unknown anneal mode {mode!r}")
    out[idx] = np.maximum(out[idx] - drop, 0.0)
    return out


def replay_removals(N, removals):
    """Binary mask obtained by zeroing every index in ``removals``."""
    mask = np.ones(N)
    for r in removals:
        mask[list(r.indices)] = 0.0
    return mask
