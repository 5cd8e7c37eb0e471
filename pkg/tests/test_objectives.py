import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hssl.autograd import Tensor
from hssl.errors import ContractError, DimensionError, ParameterError
from hssl.nn import Linear
from hssl.objectives import (MemoryBank, ProjectionHead, center_update, clustering_loss,
                             ema_update, infonce_loss, masked_reconstruction_loss,
                             teacher_distribution)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_simplex(rng, k):
    x = rng.exponential(size=k) * rng.integers(0, 2, size=k).clip(1e-3, 1)
    return x / x.sum()


# -- clustering ---------------------------------------------------------------

def test_clustering_loss_hand_values():
    assert clustering_loss(np.array([0.7, 0.3]), np.array([0.6, 0.4])).item() == pytest.approx(
        -(0.7 * math.log(0.6) + 0.3 * math.log(0.4)), abs=1e-12)
    assert clustering_loss(np.array([0.7, 0.3]), np.array([0.6, 0.4])).item() == pytest.approx(0.63247, abs=1e-4)
    assert clustering_loss(np.full(4, 0.25), np.full(4, 0.25)).item() == pytest.approx(math.log(4))
    assert clustering_loss(np.eye(3)[1], np.eye(3)[1]).item() == pytest.approx(0.0, abs=1e-12)


def test_clustering_loss_gibbs_inequality():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        p, q = random_simplex(rng, k), random_simplex(rng, k)
        entropy = -np.sum(p * np.log(np.clip(p, 1e-12, None)))
        assert clustering_loss(p, q).item() >= entropy - 1e-12


def test_clustering_loss_gradient_only_reaches_prediction():
    p = Tensor(np.array([0.2, 0.8]), requires_grad=True)
    q = Tensor(np.array([0.5, 0.5]), requires_grad=True)
    clustering_loss(p, q).backward()
    assert p.grad is None
    np.testing.assert_allclose(q.grad, [-0.4, -1.6])


def test_clustering_loss_rejects_unnormalized():
    with pytest.raises(ContractError):
        clustering_loss(np.array([0.5, 0.6]), np.array([0.5, 0.5]))
    with pytest.raises(ContractError):
        clustering_loss(np.array([0.5, 0.5]), np.array([0.2, 0.2]))
    with pytest.raises(DimensionError):
        clustering_loss(np.array([0.5, 0.5]), np.full(3, 1 / 3))


def test_clustering_loss_batch_mean():
    p = np.array([[1.0, 0.0], [0.5, 0.5]])
    q = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert clustering_loss(p, q).item() == pytest.approx(math.log(2))


# -- teacher distribution -----------------------------------------------------

def test_teacher_distribution_cases():
    logits = np.array([1.0, 0.0])
    out = teacher_distribution(logits, np.zeros(2), 0.04).data
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-9)
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(teacher_distribution(x, x, 0.04).data, np.full(3, 1 / 3))
    plain = np.exp(x / 0.5) / np.exp(x / 0.5).sum()
    np.testing.assert_allclose(teacher_distribution(x, np.zeros(3), 0.5).data, plain)
    with pytest.raises(ParameterError):
        teacher_distribution(x, np.zeros(3), 0.0)


def test_teacher_distribution_is_off_tape():
    z = Tensor(np.array([0.1, 0.4]), requires_grad=True)
    assert not teacher_distribution(z, np.zeros(2), 0.1).requires_grad


# -- InfoNCE ------------------------------------------------------------------

def test_infonce_hand_values():
    q = np.array([1.0, 0.0, 0.0])
    orth = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert infonce_loss(q, q, orth, 1.0).item() == pytest.approx(math.log(math.e + 2) - 1, abs=1e-12)
    assert infonce_loss(q, q, orth, 1.0).item() == pytest.approx(0.55145, abs=1e-4)
    opposite = np.array([[-1.0, 0.0, 0.0]] * 2)
    assert infonce_loss(q, q, opposite, 1.0).item() == pytest.approx(math.log(1 + 2 * math.exp(-2)), abs=1e-12)


def test_infonce_monotone_in_positive_similarity():
    rng = np.random.default_rng(3)
    bank = unit(rng.standard_normal((16, 2)))
    q = np.array([1.0, 0.0])
    losses = [infonce_loss(q, np.array([math.cos(a), math.sin(a)]), bank, 0.2).item()
              for a in np.linspace(math.pi, 0.0, 40)]
    assert np.all(np.diff(losses) < 0)


def test_infonce_grows_with_duplicated_key_negatives():
    q = np.array([1.0, 0.0])
    losses = [infonce_loss(q, q, np.tile(q, (n, 1)), 1.0).item() for n in (1, 10, 100, 1000)]
    assert np.all(np.diff(losses) > 0)
    assert losses[-1] == pytest.approx(math.log(1001))


def test_infonce_errors():
    q = np.array([1.0, 0.0])
    with pytest.raises(ContractError):
        infonce_loss(q, q, MemoryBank(4, 2), 0.2)
    with pytest.raises(ParameterError):
        infonce_loss(q, q, np.array([[0.0, 1.0]]), 0.0)
    with pytest.raises(ContractError):
        infonce_loss(np.array([2.0, 0.0]), q, np.array([[0.0, 1.0]]), 0.2)


# -- EMA and centering --------------------------------------------------------

def test_ema_examples():
    rng = np.random.default_rng(0)
    t = Linear(2, 2, rng).astype(np.float64)
    s = Linear(2, 2, rng).astype(np.float64)
    for p in t.parameters():
        p.data[...] = 1.0
    for p in s.parameters():
        p.data[...] = 0.0
    ema_update(t, s, 0.9)
    assert all(np.allclose(p.data, 0.9) for p in t.parameters())
    before = t.state_dict()
    ema_update(t, s, 1.0)
    assert all(np.array_equal(before[k], v) for k, v in t.state_dict().items())
    ema_update(t, s, 0.0)
    assert all(np.all(v == 0.0) for v in t.state_dict().values())


@given(st.floats(0, 1), st.integers(0, 1000))
def test_ema_is_a_contraction(m, seed):
    rng = np.random.default_rng(seed)
    t = {"w": rng.standard_normal(5)}
    s = {"w": rng.standard_normal(5)}
    gap = np.abs(t["w"] - s["w"])
    ema_update(t, s, m)
    np.testing.assert_allclose(np.abs(t["w"] - s["w"]), m * gap, rtol=1e-12, atol=1e-15)


def test_ema_errors():
    with pytest.raises(ContractError):
        ema_update({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.5)
    with pytest.raises(ParameterError):
        ema_update({"a": np.zeros(1)}, {"a": np.zeros(1)}, 1.5)


def test_center_update_examples():
    np.testing.assert_allclose(center_update(np.zeros(2), np.ones((3, 2)), 0.9), [0.1, 0.1])
    c = np.array([0.3, -0.2])
    np.testing.assert_array_equal(center_update(c, np.ones((3, 2)), 1.0), c)
    logits = np.random.default_rng(1).standard_normal((4, 2))
    np.testing.assert_allclose(center_update(c, logits, 0.0), logits.mean(axis=0))
    with pytest.raises(ContractError):
        center_update(c, np.zeros((0, 2)), 0.9)
    with pytest.raises(ParameterError):
        center_update(c, logits, -0.1)


# -- memory bank --------------------------------------------------------------

def test_memory_bank_fifo_and_norms():
    rng = np.random.default_rng(0)
    bank = MemoryBank(64, 4)
    history = []
    for _ in range(10_000 // 8):
        keys = rng.standard_normal((8, 4)) * rng.uniform(0.1, 10)
        bank.enqueue(keys)
        history.extend(unit(keys))
    stored = bank.keys
    assert len(bank) == 64
    np.testing.assert_allclose(np.linalg.norm(stored, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(stored, np.array(history[-64:]), atol=1e-6)


def test_memory_bank_partial_fill_and_state(rng):
    bank = MemoryBank(5, 3)
    bank.enqueue(rng.standard_normal((2, 3)))
    assert bank.keys.shape == (2, 3)
    other = MemoryBank(5, 3)
    other.load_state(bank.state())
    np.testing.assert_array_equal(other.keys, bank.keys)
    with pytest.raises(DimensionError):
        bank.enqueue(np.ones((1, 4)))
    with pytest.raises(ParameterError):
        MemoryBank(0, 3)


# -- masked reconstruction ----------------------------------------------------

def test_masked_reconstruction_properties(rng):
    target = rng.standard_normal((2, 6, 8))
    mask = np.zeros((2, 6), bool)
    mask[:, :3] = True
    norm = (target - target.mean(-1, keepdims=True)) / np.sqrt(target.var(-1, keepdims=True) + 1e-6)
    assert masked_reconstruction_loss(norm, target, mask).item() == pytest.approx(0.0, abs=1e-20)
    pred = rng.standard_normal(target.shape)
    base = masked_reconstruction_loss(pred, target, mask).item()
    pred2 = pred.copy()
    pred2[~mask] += 100.0 * rng.standard_normal((int((~mask).sum()), 8))
    assert masked_reconstruction_loss(pred2, target, mask).item() == pytest.approx(base, rel=1e-12)
    zero = masked_reconstruction_loss(np.zeros((64, 32, 16)), rng.standard_normal((64, 32, 16)),
                                      np.ones((64, 32), bool)).item()
    assert zero == pytest.approx(1.0, abs=1e-4)


def test_masked_reconstruction_errors():
    with pytest.raises(ContractError):
        masked_reconstruction_loss(np.zeros((1, 2, 3)), np.ones((1, 2, 3)), np.zeros((1, 2), bool))
    with pytest.raises(DimensionError):
        masked_reconstruction_loss(np.zeros((1, 2, 3)), np.ones((1, 2, 4)), np.ones((1, 2), bool))


# -- projection head ----------------------------------------------------------

def test_projection_head_logits_are_cosines(rng):
    head = ProjectionHead(16, 32, rng, hidden_dim=24, bottleneck_dim=8)
    x = rng.standard_normal((5, 16)).astype(np.float32)
    logits = head(x).data
    assert logits.shape == (5, 32)
    assert np.all(np.abs(logits) <= 1.0 + 1e-5)
    np.testing.assert_allclose(np.linalg.norm(head.embed(x).data, axis=1), 1.0, atol=1e-5)
