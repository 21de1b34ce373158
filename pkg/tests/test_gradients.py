import pytest

from gradcheck import all_cases, run_case


@pytest.mark.parametrize("name,seed", all_cases())
def test_finite_difference(name, seed):
    worst = run_case(name, seed)
    assert worst <= 1.0, f"{name}[{seed}] gradient error {worst:.3g}x tolerance"


def test_oracle_catches_a_wrong_backward():
    import numpy as np

    from gradcheck import Problem, check
    from m2gan import tensor as T

    x = T.Tensor(np.array([0.5, -1.5]), requires_grad=True)

    def bad_square():
        return T._make(x.data**2, (x,), lambda g: (g * x.data,), "bad_square").sum()  # missing factor 2

    assert check(Problem(bad_square, [x]), np.random.default_rng(0)) > 1.0
