import numpy as np
import pytest

from subnetlab.optim import AdamHyper, AdamState, NonFiniteGradientError, adam_step
from subnetlab.params import ParameterTree


def _tree(**arrays):
    return ParameterTree({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()})


def test_zero_gradients_leave_params_unchanged():
    params = _tree(a=[1.0, -2.0], b=[[0.5]])
    grads = _tree(a=[0.0, 0.0], b=[[0.0]])
    out, state = adam_step(params, grads, AdamState.zeros(params), AdamHyper(lr=0.1))
    assert out.equals_bitwise(params)
    assert state.step == 1


def test_hand_evaluated_adam_update():
    # one scalar parameter at 0, gradient 1, step 1:
    # m=0.1, v=0.001, mhat=1, vhat=1 -> param = -lr * 1/(1+eps) ~ -0.1
    params = _tree(w=[0.0])
    grads = _tree(w=[1.0])
    hyper = AdamHyper(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    out, state = adam_step(params, grads, AdamState.zeros(params), hyper)
    assert out["w"][0] == pytest.approx(-0.1, abs=1e-7)
    assert state.step == 1
    assert state.m["w"][0] == pytest.approx(0.1)
    assert state.v["w"][0] == pytest.approx(0.001)


def test_freeze_filter_keeps_params_and_moments_bitwise():
    rng = np.random.default_rng(0)
    params = _tree(**{"encoder/w": rng.standard_normal((3, 3)),
                      "ctc_head/w": rng.standard_normal((3, 2))})
    state = AdamState.zeros(params)
    frozen_before = params["encoder/w"].copy()
    for step in range(5):
        grads = _tree(**{"encoder/w": rng.standard_normal((3, 3)),
                         "ctc_head/w": rng.standard_normal((3, 2))})
        params, state = adam_step(params, grads, state, AdamHyper(lr=0.01),
                                  trainable_filter=lambda p: not p.startswith("encoder/"))
    assert np.array_equal(params["encoder/w"].view(np.uint8), frozen_before.view(np.uint8))
    assert np.array_equal(state.m["encoder/w"], np.zeros((3, 3)))
    assert not np.array_equal(params["ctc_head/w"], np.zeros((3, 2)))
    assert state.step == 5


def test_non_finite_gradient_names_the_parameter():
    params = _tree(**{"encoder/w": [1.0], "ok": [1.0]})
    grads = {"encoder/w": np.array([np.inf], dtype=np.float32),
             "ok": np.array([0.0], dtype=np.float32)}
    with pytest.raises(NonFiniteGradientError) as err:
        adam_step(params, grads, AdamState.zeros(params), AdamHyper())
    assert "encoder/w" in str(err.value)


def test_gradient_shape_mismatch_is_an_error():
    params = _tree(w=[[1.0, 2.0]])
    grads = _tree(w=[1.0, 2.0])
    with pytest.raises(ValueError):
        adam_step(params, grads, AdamState.zeros(params), AdamHyper())


def test_missing_gradient_entry_counts_as_zero():
    params = _tree(a=[1.0], b=[2.0])
    grads = _tree(a=[1.0])
    out, _ = adam_step(params, grads, AdamState.zeros(params), AdamHyper(lr=0.1))
    assert out["b"][0] == params["b"][0]
    assert out["a"][0] != params["a"][0]


def test_update_is_deterministic_bitwise():
    rng = np.random.default_rng(3)
    params = _tree(w=rng.standard_normal((8, 8)))
    grads = _tree(w=rng.standard_normal((8, 8)))

    def run():
        p, s = params.copy(), AdamState.zeros(params)
        for _ in range(3):
            p, s = adam_step(p, grads, s, AdamHyper(lr=0.05))
        return p

    assert run().equals_bitwise(run())
