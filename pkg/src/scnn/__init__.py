"""Structured component forecasting: decoupling layers, extrapolation, fusion and training."""

from .data import SeriesBatch, Standardizer, SynthSpec, generate, load_csv, save_csv
from .network import SCNN, ForecastDistribution, ModelConfig, count_parameters, load_checkpoint, save_checkpoint
from .train import EvalReport, TrainConfig, evaluate, fit

__all__ = ["SCNN", "ModelConfig", "ForecastDistribution", "count_parameters", "save_checkpoint",
           "load_checkpoint", "SeriesBatch", "Standardizer", "SynthSpec", "generate", "load_csv",
           "save_csv", "TrainConfig", "EvalReport", "fit", "evaluate"]
