import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfalab import autodiff as ad
from cfalab.errors import DimensionError, EmptyInputError, ParameterError
from cfalab.pooling import FocalPooling, focal_pool, grounding_closed_form, grounding_gradient

mp.mp.dps = 40


def _pool(patches, fp: FocalPooling):
    tape = ad.Tape()
    return focal_pool(tape.const(patches), fp.bind(tape, requires_grad=False))


def _random(seed, n=5, d=4, d_k=3, std=0.8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), FocalPooling.init(d, d_k, rng, std=std)


def test_identical_patches_give_uniform_weights():
    _, fp = _random(0)
    p = np.tile(np.array([[0.3, -1.0, 2.0, 0.5]]), (6, 1))
    res = _pool(p, fp)
    np.testing.assert_allclose(res.alphas.value, np.full(6, 1 / 6), atol=1e-15)
    np.testing.assert_allclose(res.v_global.value, p[0] @ fp.w_v, atol=1e-13)


def test_single_patch():
    p, fp = _random(1, n=1)
    res = _pool(p, fp)
    assert res.alphas.value.tolist() == [1.0]
    np.testing.assert_allclose(res.v_global.value, p[0] @ fp.w_v, atol=1e-14)


def test_scalar_oracle():
    p, fp = _random(2, n=3, d=4, d_k=4)
    P = [[mp.mpf(x) for x in row] for row in p]

    def mat(a, b):
        return [[mp.fsum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]

    wq, wk, wv, q = (
        [[mp.mpf(x) for x in row] for row in m] for m in (fp.w_q, fp.w_k, fp.w_v, fp.q_focal)
    )
    keys = mat(P, wq)
    query = mat(q, wk)[0]
    scores = [mp.fsum(k * qq for k, qq in zip(row, query)) / mp.sqrt(4) for row in keys]
    z = mp.fsum(mp.e**s for s in scores)
    alpha = [mp.e**s / z for s in scores]
    vals = mat(P, wv)
    v = [mp.fsum(alpha[i] * vals[i][j] for i in range(3)) for j in range(4)]

    res = _pool(p, fp)
    np.testing.assert_allclose(res.alphas.value, [float(a) for a in alpha], rtol=1e-13)
    np.testing.assert_allclose(res.v_global.value, [float(x) for x in v], rtol=1e-12, atol=1e-14)


def test_batched_matches_per_sample():
    rng = np.random.default_rng(3)
    p = rng.normal(size=(3, 5, 4))
    _, fp = _random(3)
    tape = ad.Tape()
    res = focal_pool(tape.const(p), fp.bind(tape))
    for b in range(3):
        single = _pool(p[b], fp)
        np.testing.assert_allclose(res.alphas.value[b], single.alphas.value, atol=1e-15)
        np.testing.assert_allclose(res.v_global.value[b], single.v_global.value, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9))
def test_alphas_form_a_simplex_and_permutation_equivariance(seed, n):
    p, fp = _random(seed, n=n)
    res = _pool(p, fp)
    a = res.alphas.value
    assert np.all(a >= 0)
    assert abs(a.sum() - 1.0) <= 1e-12
    perm = np.random.default_rng(seed).permutation(n)
    res_p = _pool(p[perm], fp)
    np.testing.assert_allclose(res_p.alphas.value, a[perm], atol=1e-15)
    np.testing.assert_allclose(res_p.v_global.value, res.v_global.value, atol=1e-12)


def test_pool_gradients_pass_finite_differences():
    p, fp = _random(4)
    w = np.random.default_rng(5).normal(size=4)

    def f(params):
        tape = params["w_v"].tape
        res = focal_pool(tape.const(p), params)
        return ad.add(ad.dot(res.v_global, w), ad.reduce("sum", ad.square(res.alphas)))

    report = ad.finite_diff_check(f, fp.arrays())
    assert report.passed(1e-4), report.max_rel_err
    assert {c.name for c in report.checks} == {"q_focal", "w_q", "w_k", "w_v"}


def test_empty_patch_set():
    _, fp = _random(0)
    with pytest.raises(EmptyInputError):
        _pool(np.zeros((0, 4)), fp)


def test_bad_shapes():
    with pytest.raises(DimensionError):
        FocalPooling(np.zeros((1, 4)), np.zeros((4, 3)), np.zeros((4, 2)), np.zeros((4, 4)))
    with pytest.raises(DimensionError):
        FocalPooling(np.zeros((2, 4)), np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 4)))
    with pytest.raises(ParameterError):
        FocalPooling(np.full((1, 2), np.nan), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))


# -- grounding -------------------------------------------------------------------------


def test_grounding_orthogonal_target_gives_zero():
    p = np.eye(4)[:3]
    fp = FocalPooling.init(4, 4, np.random.default_rng(0))
    fp.w_v = np.eye(4)
    res = _pool(p, fp)
    g = grounding_gradient(res, p, fp, np.array([0.0, 0.0, 0.0, 1.0]), 0.1)
    assert np.all(g == 0.0)


def test_grounding_points_at_matching_patch():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(5, 4))
    j = int(np.argmax((p * p).sum(axis=1)))
    fp = FocalPooling.init(4, 4, rng)
    fp.w_v = np.eye(4)
    g = grounding_gradient(_pool(p, fp), p, fp, p[j], 0.07)
    # p_j . p_j >= |p_k . p_j| for the longest row, so it wins
    assert int(np.argmax(g)) == j


def test_grounding_equals_closed_form_on_seeded_instances():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        p, fp = _random(seed, n=n)
        t = rng.normal(size=4)
        tau = float(rng.uniform(0.01, 1.0))
        g = grounding_gradient(_pool(p, fp), p, fp, t, tau)
        ref = grounding_closed_form(p, fp, t, tau)
        np.testing.assert_allclose(g, ref, rtol=0, atol=1e-10 * max(1.0, np.abs(ref).max()))
        assert int(np.argmax(g)) == int(np.argmax(ref))


def test_grounding_rejects_cosine_and_bad_tau():
    p, fp = _random(0)
    res = _pool(p, fp)
    with pytest.raises(ParameterError):
        grounding_gradient(res, p, fp, np.ones(4), 0.1, sim_kind="cosine")
    with pytest.raises(ParameterError):
        grounding_gradient(res, p, fp, np.ones(4), 0.0)


def test_init_defaults():
    fp = FocalPooling.init(8)
    assert fp.d_k == 8 and fp.d_llm == 8
    assert abs(fp.q_focal.std() - 0.02) < 0.02
    assert math.isfinite(float(fp.w_v.sum()))
