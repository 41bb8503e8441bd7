"""Pin BLAS to one thread before numpy loads so results are reproducible."""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("GFR_THREADS", "1"))
