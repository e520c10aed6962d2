import pytest


@pytest.fixture(scope="session")
def benchmark_result():
    """The seeded desk-scale benchmark, trained once per session."""
    from maskood.benchmark import run_benchmark

    return run_benchmark(progress=None)
