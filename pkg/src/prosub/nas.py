"""Greedy architecture search over layer counts, widths and dropout.

The tuner keeps the best trial so far and proposes its neighbours: with
probability ``1 - exploration_prob`` one field moves to an adjacent value in
its choice list, otherwise one field is resampled uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

UNIT_CHOICES = (128, 256, 512, 1024, 2048)
LAYER_CHOICES = (1, 2, 3)
DROPOUT_CHOICES = (0.0, 0.1, 0.2, 0.3, 0.4)


class NoResultError(LookupError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    scorer_hidden_layers: int = 2
    reconstructor_hidden_layers: int = 2
    scorer_units: tuple = (1024, 1024)
    reconstructor_units: tuple = (1024, 1024)
    dropout: float = 0.0

    def hidden_widths(self, which):
        """Hidden widths of one network: first layer ``units[0]``, the rest ``units[1]``."""
        if which == "scorer":
            n, units = self.scorer_hidden_layers, self.scorer_units
        elif which == "reconstructor":
            n, units = self.reconstructor_hidden_layers, self.reconstructor_units
        else:
            raise ValueError(which)
        return [units[0]] + [units[1]] * (n - 1)

    def to_dict(self):
        d = asdict(self)
        d["scorer_units"] = list(self.scorer_units)
        d["reconstructor_units"] = list(self.reconstructor_units)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scorer_units"] = tuple(d["scorer_units"])
        d["reconstructor_units"] = tuple(d["reconstructor_units"])
        return cls(**d)


def _nearest(choices, value):
    return min(choices, key=lambda c: (abs(math.log(c) - math.log(value)), c))


@dataclass(frozen=True)
class SearchSpace:
    """Choice sets for every searchable field.

    ``dropout_choices`` of ``(0.0,)`` fixes dropout, as for the progressive
    method; the hard-selection baseline searches the full list.
    """

    units: tuple = UNIT_CHOICES
    layers: tuple = LAYER_CHOICES
    dropout_choices: tuple = (0.0,)

    def fields(self):
        return {
            "scorer_hidden_layers": self.layers,
            "reconstructor_hidden_layers": self.layers,
            "scorer_units.0": self.units,
            "scorer_units.1": self.units,
            "reconstructor_units.0": self.units,
            "reconstructor_units.1": self.units,
            "dropout": self.dropout_choices,
        }

    def default(self):
        """Two hidden layers per net, widths nearest the baseline's 1063/781 units."""
        s = (_nearest(self.units, 1063), _nearest(self.units, 781))
        r = (_nearest(self.units, 781), _nearest(self.units, 1063))
        return ArchSpec(2 if 2 in self.layers else self.layers[0],
                        2 if 2 in self.layers else self.layers[0],
                        s, r, self.dropout_choices[0])

    def contains(self, arch):
        return all(get_field(arch, k) in v for k, v in self.fields().items())


def get_field(arch, name):
    if "." in name:
        attr, i = name.split(".")
        return getattr(arch, attr)[int(i)]
    return getattr(arch, name)


def set_field(arch, name, value):
    if "." in name:
        attr, i = name.split(".")
        units = list(getattr(arch, attr))
        units[int(i)] = value
        return replace(arch, **{attr: tuple(units)})
    return replace(arch, **{name: value})


@dataclass
class Trial:
    arch: ArchSpec
    step: int
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    status: str = "ok"

    @property
    def objective(self):
        if self.status != "ok" or not self.val_curve:
            return math.inf
        return float(min(self.val_curve))

    def to_json(self):
        return json.dumps(
            {
                "arch": self.arch.to_dict(),
                "step": self.step,
                "train_curve": list(map(float, self.train_curve)),
                "val_curve": list(map(float, self.val_curve)),
                "objective": self.objective if math.isfinite(self.objective) else None,
                "status": self.status,
            }
        )


@dataclass
class GreedyTuner:
    space: SearchSpace = field(default_factory=SearchSpace)
    seed: int = 0
    exploration_prob: float = 0.25
    start: ArchSpec | None = None
    history: list = field(default_factory=list)
    best_trial: Trial | None = None

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self._tried = {t.arch for t in self.history}
        if self.start is not None and not self.space.contains(self.start):
            raise ValueError(f"start arch {self.start} is outside the search space")

    @property
    def best(self):
        return self.best_trial.arch if self.best_trial is not None else None

    def propose_next(self):
        if self.best_trial is None:
            if not self.history:
                return self.start if self.start is not None else self.space.default()
            # nothing usable yet: keep exploring from the cold-start point
            base = self.start if self.start is not None else self.space.default()
        else:
            base = self.best_trial.arch
        searchable = {k: v for k, v in self.space.fields().items() if len(v) > 1}
        if not searchable:
            return base
        proposal = base
        # a few draws to avoid re-proposing an evaluated arch; fall back to the last
        for _ in range(8):
            name = list(searchable)[self.rng.integers(len(searchable))]
            choices = searchable[name]
            pos = choices.index(get_field(base, name))
            if self.rng.random() >= self.exploration_prob:
                neighbours = [p for p in (pos - 1, pos + 1) if 0 <= p < len(choices)]
                new = choices[neighbours[self.rng.integers(len(neighbours))]]
            else:
                others = [c for c in choices if c != choices[pos]]
                new = others[self.rng.integers(len(others))]
            proposal = set_field(base, name, new)
            if proposal not in self._tried:
                break
        return proposal

    def record_trial(self, trial):
        self.history.append(trial)
        self._tried.add(trial.arch)
        if trial.status == "ok" and math.isfinite(trial.objective):
            if self.best_trial is None or trial.objective < self.best_trial.objective:
                self.best_trial = trial
        return self

    def best_arch(self):
        if self.best_trial is None:
            raise NoResultError("no successful trial has been recorded")
        return self.best_trial.arch

    def best_objective_series(self):
        out, best = [], math.inf
        for t in self.history:
            if t.status == "ok":
                best = min(best, t.objective)
            out.append(best)
        return out

    def write_history(self, path):
        with open(path, "w") as fh:
            for t in self.history:
                fh.write(t.to_json() + "\n")
