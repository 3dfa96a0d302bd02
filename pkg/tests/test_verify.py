import pytest

from dlis.verify import run_suite


@pytest.mark.parametrize("suite", ["kernels", "gradients", "formats"])
def test_suites_pass(suite):
    results = run_suite(suite)
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]


def test_all_is_concatenation():
    names = [r.name for r in run_suite("all")]
    parts = [r.name for s in ("kernels", "gradients", "formats") for r in run_suite(s)]
    assert names == parts


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown suite"):
        run_suite("speed")
