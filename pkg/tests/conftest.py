import logging

import pytest

from cecsubopt.model import BenchmarkParams, make_benchmark_model, make_lq_model
from cecsubopt.tree import build_tree


@pytest.fixture(scope="session")
def bench():
    return make_benchmark_model()


@pytest.fixture(scope="session")
def bench_tree(bench):
    return build_tree(bench.N, bench.noise_support)


@pytest.fixture(scope="session")
def lq():
    A, B = BenchmarkParams().linearization
    return make_lq_model(A, B, 5.0, 1.0, 10)


@pytest.fixture(autouse=True)
def _quiet_dp_logs():
    logging.getLogger("cecsubopt.dp_oracle").setLevel(logging.ERROR)
    yield
