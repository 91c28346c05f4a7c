"""Pin BLAS pools before numpy loads; multithreaded GEMM loses on the tiny
matrices this suite pushes around."""

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
