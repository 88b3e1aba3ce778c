"""Progressive measurement subsampling with joint architecture search.

Submodules load lazily so that ``prosub.cli`` can set BLAS thread limits
before numpy is first imported.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Mlp": "nn",
    "AdamState": "nn",
    "RfeSchedule": "subsample",
    "ArchSpec": "nas",
    "SearchSpace": "nas",
    "GreedyTuner": "nas",
    "MeasurementDataset": "data",
    "SyntheticSpec": "data",
    "generate_synthetic": "data",
    "load_dataset": "data",
    "save_dataset": "data",
    "DualModel": "models",
    "run_prosub": "models",
    "train_sardu": "models",
    "ExperimentConfig": "harness",
    "run_experiment": "harness",
    "run_sequential": "harness",
    "wilcoxon_one_sided": "stats",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
