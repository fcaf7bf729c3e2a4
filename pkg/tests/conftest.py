import os

# Single-threaded BLAS before numpy loads: keeps every reduction bitwise
# reproducible no matter how many cores the host has.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
