import pytest
import numpy as np
from app import gradcheck
from app.errors import ContractError, NumericalError
from app.tensor import Tensor, _emit, matmul, mul, softmax_rows, total
from app.gradcheck import TOLERANCE, check_variant, grad_check, run_gradcheck, suite_configs


def test_exact_gradient_of_a_quadratic():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    assert grad_check(lambda t: total(mul(t, t)), x) < 1e-6


def test_softmax_readout():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    w = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    assert grad_check(lambda t: total(mul(softmax_rows(t), w)), x) < TOLERANCE


def test_wrong_backward_is_caught():
    def broken_square(t):
        return total(_emit("broken_square", (t,), t.values**2, lambda g: (g,)))

    x = Tensor([[1.5, -2.0]])
    assert grad_check(broken_square, x) > 0.1


def test_values_and_tracking_are_restored():
    values = np.arange(4.0).reshape(2, 2)
    x = Tensor(values.copy())
    grad_check(lambda t: total(matmul(t, t)), x)
    assert np.array_equal(x.values, values)
    assert x.requires_grad is False


@pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
def test_eps_range(eps):
    with pytest.raises(ContractError):
        grad_check(lambda t: total(t), Tensor([[1.0]]), eps)


def test_non_scalar_function_is_rejected():
    with pytest.raises(ContractError):
        grad_check(lambda t: mul(t, t), Tensor([[1.0, 2.0]]))


def test_non_finite_loss_names_the_entry():
    poison = Tensor([[1.0, np.nan]])
    with pytest.raises(NumericalError, match=r"\(0, 0\)"):
        grad_check(lambda t: total(mul(t, poison)), Tensor([[1.0, 2.0]]))


def test_suite_covers_every_variant_and_g_num():
    labels = [label for label, _ in suite_configs(0)]
    assert labels == [
        "linear",
        "cross_attention",
        "global_only",
        "local_only",
        "global_plus_local",
        "global_plus_local[g=0]",
        "global_plus_local[g=L]",
    ]


SUITE = list(suite_configs(7))


@pytest.mark.parametrize("label, cfg", SUITE, ids=[label for label, _ in SUITE])
def test_adapter_gradients_match_finite_differences(label, cfg):
    assert check_variant(cfg, seed=7) <= TOLERANCE, label


def test_run_gradcheck_reports_each_variant(mocker, capsys):
    mocker.patch("app.gradcheck.check_variant", return_value=2e-7)
    results = run_gradcheck(seed=7, trials=2)
    assert set(results) == {label for label, _ in suite_configs(7)}
    assert all(v == 2e-7 for v in results.values())
    assert gradcheck.check_variant.call_count == 2 * len(results)
    out = capsys.readouterr().out
    assert "global_plus_local[g=L]" in out and "2.000e-07" in out


@pytest.mark.slow
def test_twenty_seeds_per_variant():
    results = run_gradcheck(seed=0, trials=20)
    assert all(err <= TOLERANCE for err in results.values()), results
