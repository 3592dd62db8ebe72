from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reactgen import autodiff as ad
from reactgen.core import N_EXPR, FRAME_DIM, frame_name
from reactgen.losses import (
    AUPairRegistry,
    RegistryError,
    forward_diffuse,
    loss_dm,
    loss_fac,
    loss_fbk,
    target_score,
    total_loss,
)
from reactgen.schedule import build_cosine_schedule

from oracles import fac_loop, fbk_loop

SCHED = build_cosine_schedule(50)
REG = AUPairRegistry.default()
finite = st.floats(-10, 10, allow_nan=False)


def window(w=4):
    return arrays(np.float64, (w, FRAME_DIM), elements=finite)


def toy_schedule(alpha, sigma):
    return SimpleNamespace(alpha=np.array([alpha]), sigma=np.array([sigma]))


# -- registry -----------------------------------------------------------------

def test_registry_cardinalities_and_names():
    assert (len(REG.symmetric), len(REG.co_occurred), len(REG.mutually_exclusive)) == (20, 30, 58)
    for a, b in REG.all_pairs():
        assert 0 <= a < N_EXPR and 0 <= b < N_EXPR
        frame_name(a), frame_name(b)


def test_registry_only_problem_is_the_frown_overlap():
    probs = REG.problems()
    assert len(probs) == 1
    assert "symmetric" in probs[0] and "mutually_exclusive" in probs[0]
    (_, _, pair), = REG.overlaps()
    assert {frame_name(i) for i in pair} == {"mouthFrownLeft", "mouthFrownRight"}


def test_registry_from_json(tmp_path):
    path = tmp_path / "pairs.json"
    path.write_text('{"symmetric": [["eyeBlinkLeft", "eyeBlinkRight"]], "co_occurred": [], "mutually_exclusive": []}')
    reg = AUPairRegistry.from_json(path)
    assert reg.symmetric == ((0, 7),)
    assert reg.problems() == []
    path.write_text('{"symmetric": [["eyeBlinkLeft", "notAName"]]}')
    with pytest.raises((KeyError, ValueError, RegistryError)):
        AUPairRegistry.from_json(path)


# -- forward process ----------------------------------------------------------

def test_forward_diffuse_examples(rng):
    x0 = rng.standard_normal((4, FRAME_DIM))
    np.testing.assert_allclose(forward_diffuse(x0, 0, rng.standard_normal(x0.shape), SCHED), x0, atol=0.08)
    assert np.array_equal(forward_diffuse(x0, 7, np.zeros_like(x0), SCHED), SCHED.alpha[7] * x0)
    out = forward_diffuse(np.zeros(FRAME_DIM), 0, np.ones(FRAME_DIM), toy_schedule(0.6, 0.8))
    np.testing.assert_allclose(out, 0.8, atol=1e-15)


def test_target_score_examples(rng):
    x0 = rng.standard_normal((4, FRAME_DIM))
    xt = forward_diffuse(x0, 9, np.zeros_like(x0), SCHED)
    assert np.all(target_score(x0, xt, 9, SCHED) == 0)
    sch = toy_schedule(np.sqrt(0.75), 0.5)
    xt = forward_diffuse(x0, 0, np.ones_like(x0), sch)
    np.testing.assert_allclose(target_score(x0, xt, 0, sch), -2.0, atol=1e-12)
    with pytest.raises(ZeroDivisionError):
        target_score(x0, x0, 0, toy_schedule(1.0, 0.0))


@given(window(), st.integers(1, 50), st.floats(-3, 3))
def test_target_score_affine_in_xt(x0, t, shift):
    xt = np.zeros_like(x0)
    base = target_score(x0, xt, t, SCHED)
    moved = target_score(x0, xt + shift, t, SCHED)
    np.testing.assert_allclose(moved - base, -shift / SCHED.sigma[t] ** 2, rtol=1e-9, atol=1e-9)


def test_target_score_equals_minus_eps_over_sigma(rng):
    x0, eps = rng.standard_normal((3, 4, FRAME_DIM)), rng.standard_normal((3, 4, FRAME_DIM))
    t = np.array([1, 20, 50])
    xt = forward_diffuse(x0, t, eps, SCHED)
    np.testing.assert_allclose(target_score(x0, xt, t, SCHED), -eps / SCHED.sigma[t][:, None, None], rtol=1e-8, atol=1e-8)


# -- L_dm ---------------------------------------------------------------------

def test_dm_examples(rng):
    a = rng.standard_normal((4, FRAME_DIM))
    assert loss_dm(a, a) == 0.0
    assert loss_dm(a + 0.3, a) == pytest.approx(0.09, abs=1e-14)
    b = rng.standard_normal((4, FRAME_DIM))
    assert loss_dm(a, b) == pytest.approx(sum(float(v) ** 2 for v in (a - b).ravel()) / a.size, abs=1e-12)
    with pytest.raises(ValueError):
        loss_dm(a, b[:3])


def test_dm_tensor_mode_gradient(rng):
    a, b = rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 5))
    t = ad.Tensor(a, requires_grad=True)
    out = loss_dm(t, b)
    out.backward()
    np.testing.assert_allclose(t.grad, 2 * (a - b) / a.size, atol=1e-14)


# -- L_fbk --------------------------------------------------------------------

def test_fbk_hand_case():
    # w=2, scalar dim: pred sequence [0,0,1,1] vs target zeros.
    # frame steps 1 and 0, window spans 1/2 and 1/2 -> 1 + 0 + 0.5 + 0.5
    z = np.zeros((2, 1))
    assert loss_fbk(np.ones((2, 1)), z, z, z, t_index=0) == pytest.approx(2.0, abs=1e-12)
    assert fbk_loop(np.ones((2, 1)), z, z, z) == pytest.approx(2.0, abs=1e-12)


@given(window(), window(), window(), window())
def test_fbk_matches_loop_oracle(pc, tc, pp, tp):
    assert loss_fbk(pc, tc, pp, tp, 3) == pytest.approx(fbk_loop(pc, tc, pp, tp), rel=1e-10, abs=1e-10)


@given(window(), window(), window(), window(), st.integers(6, 50))
def test_fbk_gate(pc, tc, pp, tp, t):
    assert loss_fbk(pc, tc, pp, tp, t, gate=5) == 0.0
    parts = total_loss(1.0, loss_fbk(pc, tc, pp, tp, t), 0.0)
    assert parts.fbk == 0.0 and parts.total == 1.0


@given(window(), window())
def test_fbk_zero_on_match_and_nonnegative(cur, prev):
    assert loss_fbk(cur, cur, prev, prev, 0) == 0.0
    assert loss_fbk(cur, prev, prev, cur, 0) >= 0.0


def test_fbk_without_history_is_zero(rng):
    a = rng.standard_normal((4, FRAME_DIM))
    assert loss_fbk(a, -a, None, None, 0) == 0.0


def test_fbk_batched_gate_masks_rows(rng):
    pc, tc, pp, tp = (rng.standard_normal((3, 4, FRAME_DIM)) for _ in range(4))
    t = np.array([0, 9, 5])
    rows = [loss_fbk(pc[i], tc[i], pp[i], tp[i], t[i]) for i in range(3)]
    assert rows[1] == 0.0
    assert loss_fbk(pc, tc, pp, tp, t) == pytest.approx(np.mean(rows), rel=1e-12)


# -- L_fac --------------------------------------------------------------------

def test_fac_single_pair_example():
    reg = AUPairRegistry(symmetric=((0, 7),), co_occurred=(), mutually_exclusive=())
    tgt, pred = np.zeros((1, FRAME_DIM)), np.zeros((1, FRAME_DIM))
    tgt[0, 0], pred[0, 0] = 0.3, 0.1
    assert loss_fac(pred, tgt, reg) == pytest.approx(0.2, abs=1e-15)
    swapped = pred.copy()
    swapped[0, [0, 7]] = pred[0, [7, 0]]
    assert loss_fac(swapped, tgt, reg) == loss_fac(pred, tgt, reg)


@given(window(), window())
def test_fac_matches_loop_oracle(p, t):
    assert loss_fac(p, t, REG) == pytest.approx(fac_loop(p, t, REG.all_pairs()), rel=1e-10, abs=1e-9)


@given(window(), window(), st.floats(-5, 5))
def test_fac_shift_invariant(p, t, c):
    assert loss_fac(p + c, t + c, REG) == pytest.approx(loss_fac(p, t, REG), rel=1e-9, abs=1e-8)
    assert loss_fac(p, t, REG) >= 0.0
    assert loss_fac(t, t, REG) == 0.0


# -- total --------------------------------------------------------------------

def test_total_examples():
    assert total_loss(1, 2, 3, 1e-4).total == pytest.approx(3.0003, abs=1e-15)
    assert total_loss(1, 2, 3, 0.0).total == 3.0
    assert total_loss(0, 0, 0).total == 0.0


@pytest.mark.parametrize("bad", ["dm", "fbk", "fac"])
def test_total_rejects_non_finite(bad):
    vals = {"dm": 1.0, "fbk": 1.0, "fac": 1.0, bad: float("nan")}
    with pytest.raises(FloatingPointError, match=bad):
        total_loss(**vals)


@given(finite, finite, finite, st.floats(0, 1))
def test_total_identity(dm, fbk, fac, lam):
    assert total_loss(dm, fbk, fac, lam).total == dm + fbk + lam * fac
