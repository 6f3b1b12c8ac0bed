import os

# Pin BLAS threading before numpy loads anywhere; single-threaded GEMMs are
# faster for this model's stacked small matrices and keep runs reproducible.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
