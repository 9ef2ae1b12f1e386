"""Calibration of graph neural classifiers on rare-category node classification."""

__version__ = "0.1.0"

from .calirare import CaliRareConfig, temperature_scale, train_calirare
from .gcn import ModelParams, TrainConfig, forward, train
from .graph import DatasetSplit, Graph, gen_synthetic, load_graph, make_split
from .influence import SolverConfig, loo_delta, loo_results, solve_hinv
from .metrics import ace, calibration_report, ece, eice
from .uncertainty import CoverageConfig, jackknife_records

__all__ = [
    "CaliRareConfig", "CoverageConfig", "DatasetSplit", "Graph", "ModelParams",
    "SolverConfig", "TrainConfig", "ace", "calibration_report", "ece", "eice", "forward",
    "gen_synthetic", "jackknife_records", "load_graph", "loo_delta", "loo_results",
    "make_split", "solve_hinv", "temperature_scale", "train", "train_calirare",
]
