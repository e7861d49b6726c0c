import pytest

from tumorsim import _accel


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("TUMORSIM_DISABLE_NUMBA", "1")
    assert _accel.backend() == "numpy"
    monkeypatch.setenv("TUMORSIM_DISABLE_NUMBA", "0")
    assert _accel.backend() == "numba"


def test_forced_backend_overrides_env(monkeypatch):
    monkeypatch.setenv("TUMORSIM_DISABLE_NUMBA", "1")
    _accel.set_backend("numba")
    try:
        assert _accel.backend() == "numba"
    finally:
        _accel.set_backend(None)
    assert _accel.backend() == "numpy"
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")
