"""Gradient-ascent unlearning for a small byte-level transformer, on a numpy autodiff engine."""

import os as _os

# ULRN_THREADS caps every worker pool, including BLAS; it must be set before numpy loads.
if _os.environ.get("ULRN_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ULRN_THREADS"])

__version__ = "0.1.0"
