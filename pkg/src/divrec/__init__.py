"""DPP-based diversity-aware recommendation with a DDPG actor-critic agent."""

from .config import RunConfig, build_config
from .data import Dataset, load_dataset, parse_movielens, preprocess
from .dpp import build_kernel, exhaustive_map, greedy_map, select_diverse
from .mf import MFConfig, extract_features, train_bprmf, train_lmf
from .pipeline import run_stage

__all__ = [
    "Dataset", "MFConfig", "RunConfig", "build_config", "build_kernel", "exhaustive_map", "extract_features",
    "greedy_map", "load_dataset", "parse_movielens", "preprocess", "run_stage", "select_diverse",
    "train_bprmf", "train_lmf",
]

__version__ = "0.1.0"
