import math

import numpy as np
import pytest

import oracles
from mcnet import imputation, rnn
from mcnet.core import ParameterStore, finite_difference_check
from mcnet.data import Batch, SubjectRecord
from mcnet.errors import ContractError, RolloutError
from mcnet.imputation import MixingCoefficients


def _store(d=2, hidden=2, layers=1, seed=0):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    rnn.add_stack(store, "rnn.mri", d, hidden, layers, rng)
    rnn.add_stack(store, "rnn.pet", d, hidden, layers, rng)
    imputation.add_imputation_params(store, d, hidden, rng)
    store["impute.mix.a"] = np.array([0.4])
    store["impute.mix.b"] = np.array([-0.3])
    store["impute.cs.b"] = rng.normal(size=d)
    store["impute.lg.b"] = rng.normal(size=2 * d)
    return store


def _batch(rng, n, t, d, m_mri=None, m_pet=None):
    m_mri = np.ones((n, t), int) if m_mri is None else np.asarray(m_mri)
    m_pet = np.ones((n, t), int) if m_pet is None else np.asarray(m_pet)
    subjects = [SubjectRecord(f"S{i}", rng.normal(size=(t, d)), rng.normal(size=(t, d)), m_mri[i], m_pet[i],
                              np.zeros(t, int), i % 2) for i in range(n)]
    return Batch.from_subjects(subjects)


def test_mixing_coefficients_sum_to_one():
    mix = MixingCoefficients(np.array([2.0]), np.array([-1.0]))
    assert mix.alpha + mix.beta == pytest.approx(1.0, abs=0)
    expected = math.exp(2.0) / (math.exp(2.0) + math.exp(-1.0))
    assert float(mix.alpha[0]) == pytest.approx(expected, abs=1e-15)


def test_cross_pet_zero_weights_and_range():
    assert np.array_equal(imputation.estimate_cross_pet(np.ones(3), np.zeros((3, 2)), np.zeros(2)), np.zeros(2))
    out = imputation.estimate_cross_pet(np.full(3, 50.0), np.ones((3, 2)), np.zeros(2))
    assert np.all(np.abs(out) <= 1.0)


def test_cross_pet_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    h, w, b = rng.normal(size=5), rng.normal(size=(5, 5)), rng.normal(size=5)
    ref = [math.tanh(v) for v in oracles.affine(h.tolist(), w.tolist(), b.tolist())]
    assert np.max(np.abs(imputation.estimate_cross_pet(h, w, b) - ref)) < 1e-12


def test_longitudinal_zero_and_block_oracle():
    rng = np.random.default_rng(2)
    d, hd = 3, 4
    hm, hp = rng.normal(size=hd), rng.normal(size=hd)
    zero = imputation.estimate_longitudinal(hm, hp, np.zeros((2 * hd, 2 * d)), np.zeros(2 * d), 1)
    assert all(np.array_equal(z, np.zeros(d)) for z in zero)
    w, b = rng.normal(size=(2 * hd, 2 * d)), rng.normal(size=2 * d)
    mri, pet = imputation.estimate_longitudinal(hm, hp, w, b, 2)
    # block form: [hm hp] @ [[A B], [C D]] = [hm A + hp C, hm B + hp D]
    a_, b_ = w[:hd, :d], w[:hd, d:]
    c_, d_ = w[hd:, :d], w[hd:, d:]
    assert np.max(np.abs(mri - (hm @ a_ + hp @ c_ + b[:d]))) < 1e-12
    assert np.max(np.abs(pet - (hm @ b_ + hp @ d_ + b[d:]))) < 1e-12
    with pytest.raises(ContractError):
        imputation.estimate_longitudinal(hm, hp, w, b, 0)


def test_longitudinal_concat_order_permutation():
    rng = np.random.default_rng(3)
    hm, hp = rng.normal(size=2), rng.normal(size=2)
    w, b = rng.normal(size=(4, 6)), rng.normal(size=6)
    swapped = np.concatenate([w[2:], w[:2]])
    a = imputation.estimate_longitudinal(hm, hp, w, b, 1)
    c = imputation.estimate_longitudinal(hp, hm, swapped, b, 1)
    assert all(np.allclose(u, v, rtol=0, atol=1e-14) for u, v in zip(a, c))


def test_combine_pet_cases():
    x_cs, x_lg = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    a = math.log(0.3 / 0.7)
    mix = MixingCoefficients(np.array([a]), np.array([0.0]))
    assert np.max(np.abs(imputation.combine_pet(x_cs, x_lg, mix, 2) - [0.3, 0.7])) < 1e-12
    assert np.array_equal(imputation.combine_pet(x_cs, x_lg, mix, 0), x_cs)
    near_one = MixingCoefficients(np.array([40.0]), np.array([0.0]))
    assert np.allclose(imputation.combine_pet(x_cs, x_lg, near_one, 3), x_cs, atol=1e-15)


def test_impute_timepoint_branches_and_poisoning():
    x = np.array([[1.0, 2.0], [np.nan, np.nan]])
    x_hat = np.array([[9.0, 9.0], [3.0, 4.0]])
    u = imputation.impute_timepoint(x, np.array([1, 0]), x_hat)
    assert np.array_equal(u[0], x[0])
    assert np.array_equal(u[1], x_hat[1])
    assert np.all(np.isfinite(u))


def test_rollout_rejects_missing_bl_mri():
    rng = np.random.default_rng(0)
    batch = _batch(rng, 2, 3, 2, m_mri=[[1, 1, 1], [0, 1, 1]])
    with pytest.raises(RolloutError):
        imputation.rollout(batch, _store(), 1)


def test_rollout_step_through_oracle():
    rng = np.random.default_rng(4)
    store = _store()
    batch = _batch(rng, 1, 3, 2, m_mri=[[1, 0, 1]], m_pet=[[0, 1, 0]])
    trace = imputation.rollout(batch, store, 1)

    def cell(mod, u, h):
        p = rnn.CellParams.from_source(store, f"rnn.{mod}.0")
        return oracles.cell(u, h, p.w_x.tolist(), p.b_x.tolist(), p.w_h.tolist(), p.w_z.tolist())[0]

    alpha = oracles.sigmoid(0.4 - (-0.3))
    w_cs, b_cs = store["impute.cs.w"].tolist(), store["impute.cs.b"].tolist()
    w_lg, b_lg = store["impute.lg.w"].tolist(), store["impute.lg.b"].tolist()
    h_m, h_p = [0.0, 0.0], [0.0, 0.0]
    x_m, x_p = batch.x_mri[0].tolist(), batch.x_pet[0].tolist()
    m_m, m_p = [1, 0, 1], [0, 1, 0]
    for t in range(3):
        if t == 0:
            u_m = x_m[0]
        else:
            lg = oracles.affine(h_m + h_p, w_lg, b_lg)
            est_m, est_lg = lg[:2], lg[2:]
            u_m = x_m[t] if m_m[t] else est_m
            assert np.max(np.abs(trace.x_hat_mri[t][0] - est_m)) < 1e-10
        h_m = cell("mri", u_m, h_m)
        cs = [math.tanh(v) for v in oracles.affine(h_m, w_cs, b_cs)]
        est_p = cs if t == 0 else [alpha * a + (1 - alpha) * b for a, b in zip(cs, est_lg)]
        u_p = x_p[t] if m_p[t] else est_p
        h_p = cell("pet", u_p, h_p)
        assert np.max(np.abs(trace.x_hat_pet[t][0] - est_p)) < 1e-10
        assert np.max(np.abs(trace.u_mri[t][0] - u_m)) < 1e-10
        assert np.max(np.abs(trace.u_pet[t][0] - u_p)) < 1e-10
        assert np.max(np.abs(trace.h_mri[t][0] - h_m)) < 1e-10
        assert np.max(np.abs(trace.h_pet[t][0] - h_p)) < 1e-10


def test_rollout_fully_observed_uses_observations():
    rng = np.random.default_rng(5)
    batch = _batch(rng, 3, 4, 2)
    trace = imputation.rollout(batch, _store(), 1)
    for t in range(4):
        assert np.array_equal(trace.u_mri[t], batch.x_mri[:, t])
        assert np.array_equal(trace.u_pet[t], batch.x_pet[:, t])
        assert trace.x_hat_pet[t] is not None


def test_rollout_ignores_values_after_bl_under_bl_masks():
    rng = np.random.default_rng(6)
    batch = _batch(rng, 4, 5, 2)
    bl = batch.restrict(bl_only=True)
    poisoned = Batch(bl.ids, bl.x_mri.copy(), bl.x_pet.copy(), bl.m_mri, bl.m_pet, bl.y, bl.c)
    poisoned.x_mri[:, 1:] = np.nan
    poisoned.x_pet[:, 1:] = 1e6
    a = imputation.rollout(bl, _store(), 1)
    b = imputation.rollout(poisoned, _store(), 1)
    for t in range(5):
        assert np.array_equal(a.h_mri[t], b.h_mri[t]) and np.array_equal(a.h_pet[t], b.h_pet[t])


def test_rollout_is_causal():
    rng = np.random.default_rng(7)
    batch = _batch(rng, 2, 5, 2)
    a = imputation.rollout(batch, _store(layers=2), 2)
    batch.x_mri[:, 3:] += 5.0
    batch.x_pet[:, 3:] -= 5.0
    b = imputation.rollout(batch, _store(layers=2), 2)
    for t in range(3):
        assert np.array_equal(a.h_mri[t], b.h_mri[t]) and np.array_equal(a.x_hat_pet[t], b.x_hat_pet[t])


def test_combined_pet_between_views():
    rng = np.random.default_rng(8)
    trace = imputation.rollout(_batch(rng, 5, 4, 2), _store(), 1)
    for t in range(1, 4):
        lo = np.minimum(trace.x_cs_pet[t], trace.x_lg_pet[t])
        hi = np.maximum(trace.x_cs_pet[t], trace.x_lg_pet[t])
        assert np.all(trace.x_hat_pet[t] >= lo - 1e-15) and np.all(trace.x_hat_pet[t] <= hi + 1e-15)


def test_estimation_loss_hand_case():
    rng = np.random.default_rng(9)
    batch = _batch(rng, 2, 2, 2, m_mri=[[1, 1], [1, 0]], m_pet=[[0, 1], [1, 1]])
    trace = imputation.rollout(batch, _store(), 1)
    total, count = 0.0, 0
    for i in range(2):
        if batch.m_mri[i, 1]:
            total += sum(abs(batch.x_mri[i, 1, j] - trace.x_hat_mri[1][i, j]) for j in range(2))
            count += 2
        for t in range(2):
            if batch.m_pet[i, t]:
                total += sum(abs(batch.x_pet[i, t, j] - trace.x_hat_pet[t][i, j]) for j in range(2))
                count += 2
    assert float(imputation.estimation_loss(trace, batch)) == pytest.approx(total / count, abs=1e-14)


def test_estimation_loss_trivial_cases():
    rng = np.random.default_rng(10)
    batch = _batch(rng, 2, 3, 2)
    trace = imputation.rollout(batch, _store(), 1)
    none = np.zeros((2, 3))
    assert imputation.estimation_loss(trace, batch, none, none) == 0.0
    perfect = Batch(batch.ids, np.stack([trace.x_hat_pet[0]] + trace.x_hat_mri[1:], axis=1),
                    np.stack(trace.x_hat_pet, axis=1), batch.m_mri, batch.m_pet, batch.y, batch.c)
    assert float(imputation.estimation_loss(trace, perfect)) == 0.0


def test_estimation_loss_gradients():
    rng = np.random.default_rng(11)
    store = _store(d=3, hidden=4, layers=2, seed=3)
    batch = _batch(rng, 3, 4, 3, m_mri=[[1, 0, 1, 1]] * 3, m_pet=[[0, 1, 0, 1]] * 3)
    err = finite_difference_check(store, lambda src: imputation.estimation_loss(
        imputation.rollout(batch, src, 2), batch), step=1e-3, n_coords=120, order=4)
    assert err < 1e-4


def test_provenance_tags():
    prov_mri, prov_pet = imputation.provenance(np.array([[1, 0, 1]]), np.array([[0, 0, 1]]))
    assert prov_mri.tolist() == [["observed", "imputed-lg", "observed"]]
    assert prov_pet.tolist() == [["imputed-cs", "imputed-mixed", "observed"]]
