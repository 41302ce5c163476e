import numpy as np
import pytest

from gradcheck import TOLERANCE, PROBLEMS, check_grad_params, check_path_gradient, run_suites, suites


def test_every_suite_passes():
    results = run_suites(trials=3, seed=1)
    assert len(results) == len(suites())
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert failed == []


def test_result_reports_tolerance():
    result = run_suites(trials=1, seed=0)[0]
    assert result.tolerance == TOLERANCE
    assert result.trials == 1


def test_all_coordinates_can_be_probed():
    assert check_grad_params(np.random.default_rng(0), coords=None) < TOLERANCE
    check = check_path_gradient(PROBLEMS["wfr"], coords=None)
    assert check(np.random.default_rng(1)) < TOLERANCE


@pytest.mark.slow
def test_hundred_trials_over_every_coordinate():
    results = run_suites(trials=100, seed=7, coords=None)
    assert all(r.trials == 100 for r in results)
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert failed == []
