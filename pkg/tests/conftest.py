"""Shared test configuration.

Pins BLAS to one thread before numpy loads: the workload is thousands of
tiny matmuls, where thread fan-out costs more than it buys.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
