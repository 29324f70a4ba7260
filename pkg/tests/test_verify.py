from networks import layers
from harness.verify import GradientOps, results_table, run_checks


def test_all_checks_pass():
    results = run_checks()
    assert len(results) >= 10
    failed = [(r.name, r.error, r.detail) for r in results if not r.passed]
    assert failed == []


def test_checks_pass_for_other_seeds():
    assert all(r.passed for r in run_checks(seed=3))


def test_corrupted_linear_backward_is_caught():
    def scaled_backward(cache, dy):
        dx, dW, db = layers.linear_backward(cache, dy)
        return dx, 1.01 * dW, db

    results = {r.name: r for r in run_checks(GradientOps(linear_backward=scaled_backward))}
    assert not results["linear_grad"].passed
    assert results["linear_grad"].detail == "worst W"
    assert results["batchnorm_grad"].passed


def test_crashing_op_fails_its_check_only():
    def broken(*args):
        raise RuntimeError("boom")

    results = {r.name: r for r in run_checks(GradientOps(standardize_backward=broken))}
    assert not results["standardize_grad"].passed
    assert "boom" in results["standardize_grad"].detail
    assert results["oracle_mixing"].passed


def test_results_table():
    table = results_table(run_checks())
    assert list(table.columns) == ["check", "passed", "error", "detail"]
    assert table["passed"].all()
