import os

# pin BLAS to one thread before numpy loads anywhere: keeps the measured
# runtimes honest for a single core and removes reduction-order variance
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import sys

sys.path.insert(0, os.path.dirname(__file__))
