import os

# Pin linear-algebra threading before numpy initializes: on small tensors the
# thread-pool overhead dominates, and the acceptance runtime bounds are
# stated single-core.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0x5EED)
