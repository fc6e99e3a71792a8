"""Two-stage quantization for optimal stopping of partially observed Markov chains."""

from qstop.bounds import ErrorReport, error_report
from qstop.chain import QuantizedChain, chain_quant_errors, exact_chain, quantize_chain
from qstop.dp import ValueTable, backward_step, solve
from qstop.filtering import PathEnsemble, bayes_update, simulate_paths
from qstop.model import MixedMeasure, StoppingModel
from qstop.quantize import WeightedGrid, quantize_measure
from qstop.watertank import WaterTankParams, build_watertank

__all__ = [
    "ErrorReport", "error_report", "QuantizedChain", "chain_quant_errors", "exact_chain", "quantize_chain",
    "ValueTable", "backward_step", "solve", "PathEnsemble", "bayes_update", "simulate_paths",
    "MixedMeasure", "StoppingModel", "WeightedGrid", "quantize_measure", "WaterTankParams", "build_watertank",
]
