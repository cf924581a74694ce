"""Synthetic designs, dataset IO and experiment runners."""
from .designs import (DEFAULTS, FAMILIES, Dataset, SyntheticDesign, ar1_covariance,
                      equicorrelated_covariance, generate, gmm_centers, probit_coefficients)
from .io import (DataParseError, LibsvmParseError, format_float, format_table, parse_libsvm, read_libsvm, read_table,
                 write_libsvm, write_table)
from .runners import (FitOptions, PredictionReport, SelectionReport, build_model, fit, run_convergence,
                      run_gaps, run_prediction, run_selection, select_models)

__all__ = ["DEFAULTS", "FAMILIES", "Dataset", "SyntheticDesign", "ar1_covariance",
           "equicorrelated_covariance", "generate", "gmm_centers", "probit_coefficients",
           "DataParseError", "LibsvmParseError", "format_float", "format_table", "parse_libsvm", "read_libsvm", "read_table",
           "write_libsvm", "write_table", "FitOptions", "PredictionReport", "SelectionReport",
           "build_model", "fit", "run_convergence", "run_gaps", "run_prediction", "run_selection",
           "select_models"]
