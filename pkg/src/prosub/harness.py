"""Experiment runner: sequential warm-started targets, baselines, reports, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    MeasurementDataset,
    NormalizationSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    make_folds,
    normalize,
)
from .models import (
    DualModel,
    TrainingFailure,
    WarmStart,
    evaluate_mse,
    run_prosub,
    sardu_arch,
    train_sardu,
)
from .nas import DROPOUT_CHOICES, UNIT_CHOICES, ArchSpec, GreedyTuner, SearchSpace, Trial
from .nn import load_mlp, save_mlp
from .subsample import RfeSchedule

log = logging.getLogger(__name__)

METHODS = ("prosub", "prosub_no_nas", "sardu", "sardu_bof", "sardu_nas")
DEFAULT_NORMALIZATION = {
    "prosub": "per_measurement_max99",
    "prosub_no_nas": "per_measurement_max99",
    "sardu": "global_max99",
    "sardu_bof": "global_max99",
    "sardu_nas": "global_max99",
}


@dataclass
class ExperimentConfig:
    method: str = "prosub"
    m_schedule: tuple = (500, 250, 100, 50, 40, 30, 20, 10)
    data: str | None = None
    synthetic: SyntheticSpec | None = None
    first_stage: tuple = (4, 8)
    later_stage: tuple = (1, 5)
    epochs: int = 200
    anneal_window: int = 20
    batch: int = 1500
    lr: float = 1e-3
    seed: int = 0
    folds: int = 5
    units: tuple = UNIT_CHOICES
    exploration_prob: float = 0.25
    normalization: str | None = None
    bof_runs: int = 5
    out: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        self.m_schedule = tuple(int(m) for m in self.m_schedule)
        if not self.m_schedule:
            raise ValueError("empty M schedule")
        if any(a <= b for a, b in zip(self.m_schedule, self.m_schedule[1:])):
            raise ValueError(f"M schedule must be strictly descending, got {self.m_schedule}")
        if (self.data is None) == (self.synthetic is None):
            raise ValueError("give exactly one of data and synthetic")
        self.units = tuple(int(u) for u in self.units)
        self.first_stage = tuple(self.first_stage)
        self.later_stage = tuple(self.later_stage)

    @property
    def normalization_mode(self):
        return self.normalization or DEFAULT_NORMALIZATION[self.method]

    def check_against(self, N):
        if self.m_schedule[0] >= N:
            raise ValueError(f"target M={self.m_schedule[0]} is not below N={N}")

    def load(self):
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        return load_dataset(self.data)

    def to_dict(self):
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict() if self.synthetic else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("synthetic") is not None:
            d["synthetic"] = SyntheticSpec.from_dict(d["synthetic"])
        return cls(**d)


@dataclass
class RunReport:
    method: str
    M: int
    N: int
    fold: int
    seed: int
    selected: list
    score: list
    masks: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    val_mse: float = math.nan
    test_mse: float = math.nan
    warm_start_val_mse: float | None = None
    total_epochs: int = 0
    wall_clock: float = 0.0
    status: str = "ok"
    error: str | None = None

    def numerics(self):
        """Everything except wall-clock time, for determinism checks."""
        d = asdict(self)
        d.pop("wall_clock")
        return d

    def to_json(self):
        return json.dumps(asdict(self), indent=1, allow_nan=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FoldData:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    spec: NormalizationSpec
    measurement_ids: list


def prepare_fold(dataset, split, mode):
    """Normalise with divisors fitted on the training subjects only."""
    train, spec = normalize(dataset.select_subjects(split.train_subjects), mode)
    val, _ = normalize(dataset.select_subjects(split.validation_subjects), spec=spec)
    test, _ = normalize(dataset.select_subjects(split.test_subjects), spec=spec)
    return FoldData(train.samples, val.samples, test.samples, spec, dataset.measurement_ids)


def _trial_dict(trial):
    return {
        "arch": trial.arch.to_dict(),
        "step": trial.step,
        "status": trial.status,
        "train": list(map(float, trial.train_curve)),
        "val": list(map(float, trial.val_curve)),
    }


def _stage(config, index):
    return config.first_stage if index == 0 else config.later_stage


def _space(config, dropout=(0.0,)):
    return SearchSpace(units=config.units, dropout_choices=tuple(dropout))


@dataclass
class StageArtifacts:
    """What a finished stage hands on: checkpointable model pieces."""

    kind: str
    nets: dict
    mask: np.ndarray
    score: np.ndarray
    arch: ArchSpec
    schedule: dict


def _run_prosub_sequence(config, fd, fold, seed):
    N = fd.train.shape[1]
    use_nas = config.method == "prosub"
    space = _space(config)
    reports, artifacts = [], []
    warm = None
    for i, M in enumerate(config.m_schedule):
        start = time.perf_counter()
        T1, T = _stage(config, i)
        active = N if warm is None else int(np.count_nonzero(warm.mask == 1.0))
        report = RunReport(config.method, M, N, fold, seed, [], [])
        try:
            schedule = RfeSchedule(active, M, T, T1, config.epochs, config.anneal_window,
                                   warm_start=warm is not None)
            if warm is not None:
                report.warm_start_val_mse = evaluate_mse(warm.model, warm.mask, warm.score, fd.val)
            kwargs = {}
            if use_nas:
                kwargs["tuner"] = GreedyTuner(space, seed=seed + 7919 * i,
                                              exploration_prob=config.exploration_prob,
                                              start=warm.model.arch if warm else None)
            else:
                kwargs["arch"] = warm.model.arch if warm else space.default()
            res = run_prosub(fd.train, fd.val, schedule, warm_start=warm, seed=seed + 104729 * i,
                             batch_size=config.batch, lr=config.lr, **kwargs)
        except (TrainingFailure, ValueError) as exc:
            report.status, report.error = "failed", str(exc)
            report.wall_clock = time.perf_counter() - start
            reports.append(report)
            log.error("fold %d M=%d failed: %s; later targets skipped", fold, M, exc)
            break
        report.selected = list(res.selected)
        report.score = res.ema.values.tolist()
        report.masks = [s.mask.tolist() for s in res.steps]
        if use_nas:
            report.trials = [_trial_dict(t) for t in kwargs["tuner"].history]
        else:
            report.trials = [
                _trial_dict(Trial(s.arch, s.step, s.train_curve, s.val_curve)) for s in res.steps
            ]
        report.val_mse = evaluate_mse(res.model, res.mask, res.ema.values, fd.val)
        report.test_mse = evaluate_mse(res.model, res.mask, res.ema.values, fd.test)
        report.total_epochs = sum(len(t["train"]) for t in report.trials)
        report.wall_clock = time.perf_counter() - start
        reports.append(report)
        artifacts.append(StageArtifacts(
            "prosub", {"scorer": res.model.scorer, "reconstructor": res.model.reconstructor},
            res.mask, res.ema.values, res.model.arch,
            {"N": active, "M": M, "T1": T1, "T": T, "completed_step": T},
        ))
        warm = WarmStart(res.model, res.mask, res.ema.values)
    return reports, artifacts


def _sardu_once(config, fd, M, arch, seed):
    return train_sardu(fd.train, fd.val, M, arch, config.epochs, config.batch, config.lr, seed)


def _run_sardu_sequence(config, fd, fold, seed):
    N = fd.train.shape[1]
    reports, artifacts = [], []
    for i, M in enumerate(config.m_schedule):
        start = time.perf_counter()
        report = RunReport(config.method, M, N, fold, seed, [], [])
        trials = []
        try:
            if config.method == "sardu_nas":
                tuner = GreedyTuner(_space(config, DROPOUT_CHOICES), seed=seed + 7919 * i,
                                    exploration_prob=config.exploration_prob,
                                    start=replace(_space(config).default(), dropout=0.2))
                results = []
                for trial_idx in range(_stage(config, i)[1]):
                    arch = tuner.propose_next()
                    try:
                        r = _sardu_once(config, fd, M, arch, seed + 31 * trial_idx)
                        trial = Trial(arch, trial_idx + 1, r.train_curve, r.val_curve)
                    except TrainingFailure:
                        r, trial = None, Trial(arch, trial_idx + 1, status="failed")
                    tuner.record_trial(trial)
                    results.append((trial, r))
                best = tuner.best_trial
                if best is None:
                    raise TrainingFailure("every NAS trial failed")
                res = next(r for t, r in results if t is best)
                trials, arch = tuner.history, best.arch
            else:
                arch = sardu_arch(config.units)
                res = _sardu_once(config, fd, M, arch, seed)
                trials = [Trial(arch, 1, res.train_curve, res.val_curve)]
        except TrainingFailure as exc:
            report.status, report.error = "failed", str(exc)
            report.wall_clock = time.perf_counter() - start
            reports.append(report)
            break
        report.selected = list(res.selected)
        report.score = res.weights.tolist()
        report.masks = [res.mask.tolist()]
        report.trials = [_trial_dict(t) for t in trials]
        report.val_mse = evaluate_mse(res.reconstructor, res.mask, res.weights, fd.val)
        report.test_mse = evaluate_mse(res.reconstructor, res.mask, res.weights, fd.test)
        report.total_epochs = sum(len(t["train"]) for t in report.trials)
        report.wall_clock = time.perf_counter() - start
        reports.append(report)
        artifacts.append(StageArtifacts(
            "sardu", {"selector": res.selector.selector_net, "reconstructor": res.reconstructor},
            res.mask, res.weights, arch,
            {"N": N, "M": M},
        ))
    return reports, artifacts


def run_sequential(config, dataset, split, fold=0, seed=None):
    """Run every target in ``config.m_schedule`` on one CV split.

    Progressive methods warm-start each target from the previous one; the
    hard-selection baselines train each target from scratch. A failed stage
    ends the sequence. Returns ``(reports, artifacts)``.
    """
    config.check_against(dataset.N)
    seed = config.seed if seed is None else seed
    fd = prepare_fold(dataset, split, config.normalization_mode)
    if config.method in ("prosub", "prosub_no_nas"):
        return _run_prosub_sequence(config, fd, fold, seed)
    return _run_sardu_sequence(config, fd, fold, seed)


def best_of_five(config, dataset, split, fold=0, out_dir=None):
    """Run ``config.bof_runs`` seeds and keep the one with the lowest
    validation MSE at the final target. All runs are written when ``out_dir``
    is given."""
    runs = []
    for k in range(config.bof_runs):
        seed = config.seed + k
        reports, artifacts = run_sequential(config, dataset, split, fold, seed)
        if out_dir is not None:
            emit_reports(reports, Path(out_dir) / f"seed{seed}", artifacts,
                         measurement_ids=dataset.measurement_ids,
                         normalization=prepare_norm(dataset, split, config))
        runs.append((reports, artifacts))

    def final_val(run):
        last = run[0][-1]
        ok = last.status == "ok" and last.M == config.m_schedule[-1]
        return last.val_mse if ok else math.inf

    return min(runs, key=final_val)


def prepare_norm(dataset, split, config):
    return normalize(dataset.select_subjects(split.train_subjects), config.normalization_mode)[1]


def run_experiment(config, dataset=None):
    """Cross-validated run of ``config``; writes everything under ``config.out``."""
    dataset = dataset if dataset is not None else config.load()
    out = Path(config.out) if config.out else None
    folds = make_folds(dataset.subject_ids, config.folds)
    all_reports = []
    for f, split in enumerate(folds):
        fold_dir = out / f"fold{f}" if out else None
        if config.method == "sardu_bof":
            inner = ExperimentConfig.from_dict({**config.to_dict(), "method": "sardu"})
            reports, artifacts = best_of_five(inner, dataset, split, f,
                                              fold_dir / "runs" if fold_dir else None)
            for r in reports:
                r.method = "sardu_bof"
        else:
            reports, artifacts = run_sequential(config, dataset, split, f)
        if fold_dir is not None:
            emit_reports(reports, fold_dir, artifacts, measurement_ids=dataset.measurement_ids,
                         normalization=prepare_norm(dataset, split, config))
        all_reports.extend(reports)
    if out is not None:
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
        (out / "summary.json").write_text(json.dumps(summarize(all_reports), indent=1))
    return all_reports


def summarize(reports):
    by_m = {}
    for r in reports:
        if r.status == "ok":
            by_m.setdefault(r.M, []).append(r.test_mse)
    return {
        "targets": [
            {"M": M, "folds": len(v), "test_mse_mean": float(np.mean(v)),
             "test_mse_std": float(np.std(v))}
            for M, v in sorted(by_m.items(), reverse=True)
        ],
        "total_epochs": int(sum(r.total_epochs for r in reports)),
        "failed": [(r.fold, r.M) for r in reports if r.status != "ok"],
    }


# ----------------------------------------------------------------------------
# reports and checkpoints

def emit_reports(reports, out_dir, artifacts=(), measurement_ids=None, normalization=None):
    """One directory per target: ``report.json``, ``losses.csv``, ``selected.txt``
    and, when artifacts are given, a checkpoint."""
    out_dir = Path(out_dir)
    written = []
    for i, report in enumerate(reports):
        d = out_dir / f"M{report.M}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(report.to_json())
        with open(d / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "step", "epoch", "train_loss", "val_loss"])
            for k, t in enumerate(report.trials):
                for e, (tr, va) in enumerate(zip(t["train"], t["val"]), start=1):
                    w.writerow([k, t["step"], e, repr(tr), repr(va)])
        with open(d / "nas_trials.jsonl", "w") as fh:
            for t in report.trials:
                fh.write(json.dumps(t) + "\n")
        (d / "selected.txt").write_text("".join(f"{j}\n" for j in report.selected))
        if i < len(artifacts):
            save_checkpoint(artifacts[i], d / "checkpoint", measurement_ids, normalization)
        written.append(d)
    return written


def save_checkpoint(art, path, measurement_ids=None, normalization=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, net in art.nets.items():
        save_mlp(net, path / f"{name}.mlp")
    side = {
        "kind": art.kind,
        "mask": art.mask.tolist(),
        "score": np.asarray(art.score).tolist(),
        "arch": art.arch.to_dict(),
        "schedule": art.schedule,
        "measurement_ids": measurement_ids,
        "normalization": normalization.to_dict() if normalization else None,
    }
    (path / "checkpoint.json").write_text(json.dumps(side, indent=1))


@dataclass
class Checkpoint:
    kind: str
    nets: dict
    mask: np.ndarray
    score: np.ndarray
    arch: ArchSpec
    schedule: dict
    normalization: NormalizationSpec | None

    def warm_start(self):
        if self.kind != "prosub":
            raise ValueError("only progressive checkpoints can warm-start a run")
        model = DualModel(self.nets["scorer"], self.nets["reconstructor"], self.arch)
        return WarmStart(model, self.mask, self.score)


def load_checkpoint(path):
    path = Path(path)
    if (path / "checkpoint").is_dir():
        path = path / "checkpoint"
    side = json.loads((path / "checkpoint.json").read_text())
    names = ("scorer", "reconstructor") if side["kind"] == "prosub" else ("selector", "reconstructor")
    nets = {n: load_mlp(path / f"{n}.mlp") for n in names}
    norm = side.get("normalization")
    return Checkpoint(
        side["kind"], nets, np.array(side["mask"]), np.array(side["score"]),
        ArchSpec.from_dict(side["arch"]), side["schedule"],
        NormalizationSpec.from_dict(norm) if norm else None,
    )


def evaluate_checkpoint(path, dataset):
    """Whole-dataset MSE of a stored model, applying its frozen normalization."""
    ck = load_checkpoint(path)
    if dataset.normalization is None and ck.normalization is not None:
        dataset, _ = normalize(dataset, spec=ck.normalization)
    return evaluate_mse(ck.nets["reconstructor"], ck.mask, ck.score, dataset.samples)


def collect_reports(root):
    reports = []
    for p in sorted(Path(root).rglob("report.json")):
        if "runs" in p.parts[len(Path(root).parts):]:
            continue
        reports.append(RunReport.from_dict(json.loads(p.read_text())))
    return reports


def max_loss_jump(curve):
    """Largest epoch-to-epoch increase of a loss trace (0 when it never rises)."""
    c = np.asarray(curve, dtype=np.float64)
    if c.size < 2:
        return 0.0
    return float(max(np.max(np.diff(c)), 0.0))
