"""Tensor plumbing: matmul, ParamStore round-trips, gradient checking."""

import numpy as np
import pytest

from amlstm.core import (
    CHECKPOINT_MAGIC,
    ConfigError,
    DimensionError,
    FormatError,
    NumericError,
    ParamStore,
    atomic_write_bytes,
    check_gradients,
    check_gradients_detailed,
    matmul,
)
from amlstm.rng import Rng


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = np.eye(2)
    b = np.array([[3.0], [4.0]])
    assert np.array_equal(matmul(a, b), b)


def test_matmul_zero():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.zeros((2, 1))), np.zeros((2, 1)))


def test_matmul_hand_oracle():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    assert np.array_equal(matmul(a, b), np.array([[17.0], [39.0]]))


def test_matmul_right_identity_and_zero():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(a, np.eye(3)), a)
    assert np.array_equal(matmul(a, np.zeros((3, 4))), np.zeros((2, 4)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert "(2, 3)" in str(exc.value)


# --- ParamStore -----------------------------------------------------------

def make_store():
    store = ParamStore()
    store.add("w", np.array([[1.5, -2.0], [0.25, 3.0]]))
    store.add("b", np.array([0.0, -1e-300]))
    store.add("stat", np.arange(3.0), trainable=False)
    return store


def test_store_roundtrip_bit_exact():
    store = make_store()
    clone = ParamStore.from_bytes(store.to_bytes())
    assert clone.names() == store.names()
    for name in store.names():
        assert np.array_equal(clone.value(name), store.value(name))
        assert clone.value(name).dtype == np.float64


def test_store_save_load_file(tmp_path):
    store = make_store()
    path = tmp_path / "params.bin"
    store.save(path)
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    clone = ParamStore.load(path)
    for name in store.names():
        assert np.array_equal(clone.value(name), store.value(name))


def test_store_trainable_bookkeeping():
    store = make_store()
    assert store.trainable_names() == ["w", "b"]
    assert not store.is_trainable("stat")
    assert store.n_elements() == 4 + 2 + 3
    store.grad("w")[...] = 1.0
    store.zero_grads()
    assert np.array_equal(store.grad("w"), np.zeros((2, 2)))


def test_store_duplicate_name_rejected():
    store = make_store()
    with pytest.raises(ConfigError):
        store.add("w", np.zeros(1))


def test_store_snapshot_restore():
    store = make_store()
    snap = store.snapshot()
    store.value("w")[...] = 99.0
    store.restore(snap)
    assert store.value("w")[0, 0] == 1.5


def test_load_values_checks_names_and_shapes():
    store = make_store()
    other = ParamStore()
    other.add("w", np.zeros((3, 3)))
    with pytest.raises(FormatError):
        store.load_values(other.to_bytes())


def test_from_bytes_rejects_bad_magic():
    with pytest.raises(FormatError):
        ParamStore.from_bytes(b"NOTMAGIC" + b"\x00" * 16)


def test_from_bytes_rejects_truncation():
    blob = make_store().to_bytes()
    with pytest.raises(FormatError):
        ParamStore.from_bytes(blob[:-4])


def test_atomic_write_replaces_content(tmp_path):
    path = tmp_path / "out.bin"
    atomic_write_bytes(path, b"first")
    atomic_write_bytes(path, b"second")
    assert path.read_bytes() == b"second"
    assert list(tmp_path.iterdir()) == [path]  # no temp files left behind


# --- check_gradients ------------------------------------------------------

def test_check_gradients_quadratic():
    # f = theta . theta, analytic gradient 2 theta
    store = ParamStore()
    theta = store.add("theta", np.array([0.3, -1.2, 2.0]))
    store.grad("theta")[...] = 2.0 * theta
    err = check_gradients(lambda p: float(p.value("theta") @ p.value("theta")), store)
    assert err < 1e-9


def test_check_gradients_linear_exact():
    c = np.array([1.0, -3.0, 0.5])
    store = ParamStore()
    store.add("theta", np.array([0.1, 0.2, 0.3]))
    store.grad("theta")[...] = c
    err = check_gradients(lambda p: float(c @ p.value("theta")), store)
    assert err < 1e-9


def test_check_gradients_detects_doubled_grad():
    store = ParamStore()
    theta = store.add("theta", np.array([0.7, -0.4]))
    store.grad("theta")[...] = 4.0 * theta  # doubled on purpose
    err = check_gradients(lambda p: float(p.value("theta") @ p.value("theta")), store)
    assert abs(err - 0.5) < 1e-3


def test_check_gradients_ignores_non_trainable():
    store = ParamStore()
    store.add("theta", np.array([1.0]))
    store.add("frozen", np.array([5.0]), trainable=False)
    store.grad("theta")[...] = 2.0
    per_entry = check_gradients_detailed(
        lambda p: float(p.value("theta")[0] ** 2), store)
    assert set(per_entry) == {"theta"}


def test_check_gradients_reports_non_finite_loss():
    store = ParamStore()
    store.add("theta", np.array([1.0]))

    def bad(params):
        return float("nan")

    with pytest.raises(NumericError) as exc:
        check_gradients(bad, store)
    assert "theta" in str(exc.value)


# --- Rng ------------------------------------------------------------------

def test_rng_reproducible_draws():
    a = Rng(123).random((10_000,))
    b = Rng(123).random((10_000,))
    assert np.array_equal(a, b)


def test_rng_child_streams_independent_of_order():
    root = Rng(5)
    first = root.child("a").normal((4,))
    second = root.child("b").normal((4,))
    root2 = Rng(5)
    assert np.array_equal(root2.child("b").normal((4,)), second)
    assert np.array_equal(root2.child("a").normal((4,)), first)


def test_rng_distinct_children_differ():
    root = Rng(0)
    assert not np.array_equal(root.child("x").random((8,)),
                              root.child("y").random((8,)))


def test_rng_rejects_bad_seed_and_keys():
    with pytest.raises(ConfigError):
        Rng(-1)
    with pytest.raises(ConfigError):
        Rng(0).child(-3)
    with pytest.raises(ConfigError):
        Rng(0).child(True)


def test_rng_integers_and_permutation():
    r = Rng(9)
    draws = r.child("i").integers(0, 5, (1000,))
    assert draws.min() >= 0 and draws.max() <= 4
    perm = r.child("p").permutation(6)
    assert sorted(perm.tolist()) == list(range(6))
