import math
import types

import numpy as np
import pytest

import salad.losses as losses_mod
from salad.autodiff import Tensor, grad_check
from salad.losses import (
    MiniBatch,
    aggregation_loss,
    mse_loss,
    salad_loss,
    sample_specific_loss,
)
from salad.membank import MemoryBank, init_bank, similarity_distribution, top_k_neighbors
from salad.model import Architecture, decode, encode, init_params


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def single_sample_batch(slot=0):
    x = np.zeros(2)
    return MiniBatch(inputs=[x], views=[[x]], slot_indices=[slot])


# ---------------------------------------------------------------- MiniBatch


def test_minibatch_defaults_prototypical_to_all():
    b = MiniBatch(inputs=[np.zeros(2)] * 3, views=[[np.zeros(2)]] * 3, slot_indices=[0, 1, 2])
    assert b.prototypical.tolist() == [0, 1, 2]
    assert len(b) == 3


def test_minibatch_rejects_empty_views():
    with pytest.raises(ValueError):
        MiniBatch(inputs=[np.zeros(2)], views=[[]], slot_indices=[0])


def test_minibatch_rejects_misaligned_fields():
    with pytest.raises(ValueError):
        MiniBatch(inputs=[np.zeros(2)], views=[[np.zeros(2)]] * 2, slot_indices=[0, 1])


def test_minibatch_rejects_out_of_range_prototypical():
    with pytest.raises(ValueError):
        MiniBatch(
            inputs=[np.zeros(2)] * 2,
            views=[[np.zeros(2)]] * 2,
            slot_indices=[0, 1],
            prototypical=[5],
        )


# ---------------------------------------------------------------- mse


def test_mse_identity_is_zero():
    x = Tensor(np.array([0.3, 0.7, 0.1]))
    assert float(mse_loss(x, x).data) == 0.0


def test_mse_unit_difference():
    x = Tensor(np.array([1.0, 0.0]))
    x_hat = Tensor(np.array([0.0, 0.0]))
    assert float(mse_loss(x, x_hat).data) == 1.0


def test_mse_batch_mean_over_rows():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    x_hat = Tensor(np.zeros((2, 3)))
    expected = np.sum(np.arange(6.0) ** 2) / 2
    assert abs(float(mse_loss(x, x_hat).data) - expected) < 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_mse_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    target = Tensor(rng.random(8))
    err = grad_check(lambda t: mse_loss(t, target), rng.random(8))
    assert err < 1e-6


# ---------------------------------------------------------------- sample-specific


def test_ss_two_slot_half_mass():
    bank = MemoryBank(np.array([[1.0, 0.0], [0.0, 1.0]]), temperature=1.0)
    z = Tensor(unit([1.0, 1.0]))
    loss = sample_specific_loss(single_sample_batch(slot=0), bank, [[z]])
    assert abs(float(loss.data) - math.log(2.0)) < 1e-12
    assert abs(float(loss.data) - 0.69315) < 1e-5


def test_ss_perfect_self_identification_limit():
    rng = np.random.default_rng(1)
    embs = np.array([unit(rng.normal(size=4)) for _ in range(6)])
    bank = MemoryBank(embs.copy(), temperature=1e-3)
    batch = MiniBatch(
        inputs=[np.zeros(4)] * 6,
        views=[[np.zeros(4)]] * 6,
        slot_indices=np.arange(6),
    )
    view_embs = [[Tensor(embs[i])] for i in range(6)]
    loss = sample_specific_loss(batch, bank, view_embs)
    assert 0.0 <= float(loss.data) < 1e-6


def test_ss_multi_view_mass_stays_probability():
    rng = np.random.default_rng(2)
    bank = init_bank(10, 4, seed=3)
    batch = MiniBatch(
        inputs=[np.zeros(4)] * 4,
        views=[[np.zeros(4)] * 3] * 4,
        slot_indices=[0, 1, 2, 3],
    )
    view_embs = [[Tensor(unit(rng.normal(size=4))) for _ in range(3)] for _ in range(4)]
    loss = sample_specific_loss(batch, bank, view_embs)
    assert float(loss.data) >= 0.0


def test_ss_gradient_matches_finite_differences():
    bank = init_bank(6, 4, seed=4)
    batch = single_sample_batch(slot=2)
    err = grad_check(
        lambda t: sample_specific_loss(batch, bank, [[t]]),
        unit(np.random.default_rng(5).normal(size=4)),
    )
    assert err < 1e-4


def test_ss_detects_aliased_mass(monkeypatch):
    bank = init_bank(2, 2, seed=6)
    stub = types.SimpleNamespace(probs=Tensor(np.array([1.2, 0.3])))
    monkeypatch.setattr(losses_mod, "similarity_distribution", lambda *a, **kw: stub)
    with pytest.raises(ValueError, match="aliased"):
        sample_specific_loss(single_sample_batch(slot=0), bank, [[Tensor(unit([1.0, 0.0]))]])


# ---------------------------------------------------------------- aggregation


def test_agg_full_support_is_zero():
    bank = init_bank(5, 3, seed=7)
    z = Tensor(unit([1.0, 2.0, 3.0]))
    batch = single_sample_batch()
    loss = aggregation_loss(batch, bank, [z], k=5)
    assert abs(float(loss.data)) < 1e-12


def test_agg_quarter_mass():
    slots = np.tile(unit([1.0, 0.0]), (4, 1))
    bank = MemoryBank(slots, temperature=0.1)
    loss = aggregation_loss(single_sample_batch(), bank, [Tensor(unit([1.0, 0.0]))], k=1)
    assert abs(float(loss.data) - math.log(4.0)) < 1e-12
    assert abs(float(loss.data) - 1.38629) < 1e-5


def test_agg_rejects_oversized_k():
    bank = init_bank(4, 3, seed=8)
    with pytest.raises(ValueError):
        aggregation_loss(single_sample_batch(), bank, [Tensor(unit([1, 1, 1]))], k=5)


def test_agg_support_mass_monotone_in_k():
    rng = np.random.default_rng(9)
    for trial in range(10):
        bank = init_bank(15, 5, seed=300 + trial)
        z = unit(rng.normal(size=5))
        probs = similarity_distribution(bank, z).probs
        masses = []
        for k in range(1, 16):
            idx = top_k_neighbors(bank, z, k).indices
            masses.append(probs[idx].sum())
        assert np.all(np.diff(masses) >= -1e-15)
        assert abs(masses[-1] - 1.0) < 1e-10


def test_agg_gradient_matches_finite_differences():
    bank = init_bank(6, 4, seed=10)
    batch = single_sample_batch()
    err = grad_check(
        lambda t: aggregation_loss(batch, bank, [t], k=2),
        unit(np.random.default_rng(11).normal(size=4)),
    )
    assert err < 1e-4


def test_agg_respects_prototypical_subset():
    bank = init_bank(8, 3, seed=12)
    rng = np.random.default_rng(13)
    zs = [Tensor(unit(rng.normal(size=3))) for _ in range(4)]
    batch_all = MiniBatch(
        inputs=[np.zeros(3)] * 4,
        views=[[np.zeros(3)]] * 4,
        slot_indices=np.arange(4),
    )
    batch_one = MiniBatch(
        inputs=[np.zeros(3)] * 4,
        views=[[np.zeros(3)]] * 4,
        slot_indices=np.arange(4),
        prototypical=[2],
    )
    full = float(aggregation_loss(batch_all, bank, zs, k=3).data)
    only = float(aggregation_loss(batch_one, bank, zs, k=3).data)
    solo = float(aggregation_loss(single_sample_batch(), bank, [zs[2]], k=3).data)
    assert abs(only - solo) < 1e-12
    assert abs(full - only) > 1e-12


# ---------------------------------------------------------------- combination


def scalar_tensor(v):
    return Tensor(np.float64(v))


def test_salad_arithmetic():
    bd = salad_loss(scalar_tensor(1.0), scalar_tensor(2.0), scalar_tensor(2.0), 0.25)
    assert bd.total == 2.0
    assert bd.latent == 4.0


def test_salad_zero_lambda_reduces_to_mse():
    bd = salad_loss(scalar_tensor(0.73), scalar_tensor(5.0), scalar_tensor(9.0), 0.0)
    assert bd.total == 0.73


def test_salad_breakdown_identity():
    rng = np.random.default_rng(14)
    for _ in range(50):
        m, s, a = rng.random(3) * 3
        lam = rng.random()
        bd = salad_loss(scalar_tensor(m), scalar_tensor(s), scalar_tensor(a), lam)
        assert abs(bd.total - (bd.mse + bd.lam * (bd.ss + bd.agg))) < 1e-12


TOY = Architecture(input_dim=6, encoder_hidden=[5], latent_dim=4)


def toy_batch_and_bank(seed, n=8, n_views=2):
    rng = np.random.default_rng(seed)
    inputs = [rng.random(TOY.input_dim) for _ in range(n)]
    views = [[np.clip(x + rng.normal(scale=0.05, size=x.shape), 0, 1) for _ in range(n_views)] for x in inputs]
    batch = MiniBatch(inputs=inputs, views=views, slot_indices=np.arange(n))
    bank = init_bank(n, TOY.latent_dim, seed=seed + 1)
    return batch, bank


def toy_total(params, batch, bank, lam=0.25, k=3):
    embs = [encode(params, Tensor(x)) for x in batch.inputs]
    view_embs = [[encode(params, Tensor(v)) for v in vs] for vs in batch.views]
    mse_sum = None
    for x, z in zip(batch.inputs, embs):
        term = mse_loss(Tensor(x), decode(params, z))
        mse_sum = term if mse_sum is None else mse_sum + term
    mse_t = mse_sum * (1.0 / len(batch))
    ss_t = sample_specific_loss(batch, bank, view_embs)
    agg_t = aggregation_loss(batch, bank, embs, k)
    return salad_loss(mse_t, ss_t, agg_t, lam)


def test_latent_terms_never_touch_decoder():
    params = init_params(TOY, seed=15)
    batch, bank = toy_batch_and_bank(16)
    embs = [encode(params, Tensor(x)) for x in batch.inputs]
    view_embs = [[encode(params, Tensor(v)) for v in vs] for vs in batch.views]
    latent = sample_specific_loss(batch, bank, view_embs) + aggregation_loss(batch, bank, embs, 3)
    (latent * 0.25).backward()
    for w, b in params.decoder:
        assert w.grad is None
        assert b.grad is None
    assert any(t.grad is not None for t in params.encoder_tensors())


def test_full_objective_gradient_matches_finite_differences():
    params = init_params(TOY, seed=17)
    batch, bank = toy_batch_and_bank(18)

    params.zero_grad()
    bd = toy_total(params, batch, bank)
    bd.total_tensor.backward()
    analytic = [t.grad.copy() for t in params.encoder_tensors()]

    h = 1e-6
    worst = 0.0
    for tensor, grad in zip(params.encoder_tensors(), analytic):
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = toy_total(params, batch, bank).total
            flat[j] = keep - h
            down = toy_total(params, batch, bank).total
            flat[j] = keep
            numeric = (up - down) / (2 * h)
            rel = abs(gflat[j] - numeric) / (abs(gflat[j]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    assert worst < 1e-4


def test_aggregation_descent_concentrates_mass():
    # pushing embeddings down the aggregation gradient with a frozen bank
    # must not reduce any sample's neighbor probability mass
    bank = init_bank(12, 4, seed=19)
    bank.temperature = 0.5
    rng = np.random.default_rng(20)
    zs = [unit(rng.normal(size=4)) for _ in range(6)]
    k, lr = 3, 0.05

    def neighbor_mass(z):
        idx = top_k_neighbors(bank, z, k).indices
        return float(similarity_distribution(bank, z).probs[idx].sum())

    prev = [neighbor_mass(z) for z in zs]
    for _ in range(20):
        for i in range(len(zs)):
            leaf = Tensor(zs[i], requires_grad=True)
            neigh = top_k_neighbors(bank, zs[i], k)
            probs = similarity_distribution(bank, leaf).probs
            (-probs.take(neigh.indices).sum().log()).backward()
            zs[i] = zs[i] - lr * leaf.grad
        current = [neighbor_mass(z) for z in zs]
        for before, after in zip(prev, current):
            assert after >= before - 1e-12
        prev = current
