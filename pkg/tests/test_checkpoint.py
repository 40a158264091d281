"""Checkpoint round-trip: manifest + blob must be bit-exact."""

import numpy as np

from shapecomplete.autodiff import (
    ParamStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)


def make_store(rng):
    store = ParamStore()
    store.add("net.conv.kernels", rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
    store.add("net.conv.bias", rng.normal(size=4).astype(np.float32))
    store.add("net.fc.weights", rng.normal(size=(5, 8)).astype(np.float32))
    grads = {n: rng.normal(size=store[n].values.shape).astype(np.float32)
             for n in store.names()}
    adam_step(store, grads=grads, lr=1e-3)
    return store


def test_round_trip_bitwise(tmp_path, rng):
    store = make_store(rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, auc_coeffs=[0.5, -0.75, 0.0],
                    extra={"profile_g": 16})
    loaded, manifest = load_checkpoint(path)
    assert loaded.step_count == store.step_count
    assert manifest["auc_coeffs"] == [0.5, -0.75, 0.0]
    assert manifest["extra"]["profile_g"] == 16
    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded[name].values, store[name].values)
        np.testing.assert_array_equal(loaded.moments1[name], store.moments1[name])
        np.testing.assert_array_equal(loaded.moments2[name], store.moments2[name])
        assert loaded[name].values.dtype == store[name].values.dtype


def test_save_is_deterministic(tmp_path, rng):
    store = make_store(rng)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, store, auc_coeffs=[0.5])
    save_checkpoint(p2, store, auc_coeffs=[0.5])
    assert p1.read_bytes() == p2.read_bytes()


def test_double_round_trip_identical_bytes(tmp_path, rng):
    store = make_store(rng)
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(p1, store, auc_coeffs=[0.5, -0.5])
    loaded, _ = load_checkpoint(p1)
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p2, loaded, auc_coeffs=[0.5, -0.5])
    assert p1.read_bytes() == p2.read_bytes()


def test_float64_entries_survive(tmp_path, rng):
    store = ParamStore()
    store.add("w", rng.normal(size=(3, 3)))
    path = tmp_path / "d.ckpt"
    save_checkpoint(path, store)
    loaded, _ = load_checkpoint(path)
    assert loaded["w"].values.dtype == np.float64
    np.testing.assert_array_equal(loaded["w"].values, store["w"].values)
