"""Shared test setup.

BLAS thread caps are pinned before numpy is imported anywhere so matmul
reduction order (and with it every bit-exactness assertion) is stable
across machines.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES
