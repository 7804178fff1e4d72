import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compfeinn.neural import (MLPArch, NetworkError, forward, glorot_init, input_derivatives,
                              load_checkpoint, save_checkpoint, vjp_params)

ARCHS = [MLPArch.build(2, 2, 2, 5, "tanh"), MLPArch.build(2, 1, 3, 4, "softplus", rectify=True),
         MLPArch.build(3, 3, 1, 6, "softplus"), MLPArch.build(2, 2, 0, 1, "identity")]


def reference_forward(arch, theta, X):
    """Layer-by-layer evaluation with explicit slicing of the packed vector."""
    a, pos = X, 0
    sizes = arch.sizes
    for k in range(len(sizes) - 1):
        n_in, n_out = sizes[k], sizes[k + 1]
        W = theta[pos:pos + n_in * n_out].reshape(n_out, n_in)
        b = theta[pos + n_in * n_out:pos + n_in * n_out + n_out]
        pos += n_in * n_out + n_out
        z = a @ W.T + b
        if k < len(sizes) - 2:
            z = {"tanh": np.tanh, "softplus": lambda t: np.log1p(np.exp(t)),
                 "identity": lambda t: t}[arch.activation](z)
        a = z
    return np.abs(a) + 0.01 if arch.rectify else a


class TestArchitecture:
    def test_parameter_count(self):
        assert MLPArch.build(2, 2, 3, 30).nparams == (2 * 30 + 30) + 2 * (30 * 30 + 30) + (30 * 2 + 2)

    @pytest.mark.parametrize("sizes", [(2,), (2, 0, 1), (2, 3, 4, 1)])
    def test_invalid_sizes(self, sizes):
        with pytest.raises(NetworkError):
            MLPArch(sizes)

    def test_unknown_activation(self):
        with pytest.raises(NetworkError):
            MLPArch((2, 3, 1), "relu6")

    def test_wrong_parameter_length(self):
        arch = ARCHS[0]
        with pytest.raises(NetworkError):
            forward(arch, np.zeros(arch.nparams - 1), np.zeros((1, 2)))

    def test_wrong_input_shape(self):
        arch = ARCHS[0]
        with pytest.raises(NetworkError):
            forward(arch, glorot_init(arch, 0), np.zeros((4, 3)))


class TestInit:
    def test_deterministic(self):
        a = ARCHS[0]
        assert np.array_equal(glorot_init(a, 7), glorot_init(a, 7))
        assert not np.array_equal(glorot_init(a, 7), glorot_init(a, 8))

    def test_bounds_and_zero_bias(self):
        arch = MLPArch.build(2, 2, 2, 30)
        for W, b in arch.layers(glorot_init(arch, 1)):
            lim = np.sqrt(6.0 / sum(W.shape))
            assert np.all(np.abs(W) <= lim) and np.abs(W).max() > 0.5 * lim
            assert np.all(b == 0)


class TestForward:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_matches_reference(self, arch):
        rng = np.random.default_rng(0)
        theta = rng.normal(size=arch.nparams)
        X = rng.uniform(-1, 1, (9, arch.n_in))
        assert np.allclose(forward(arch, theta, X), reference_forward(arch, theta, X), atol=1e-13)

    def test_rectifier_floor(self):
        arch = ARCHS[1]
        out = forward(arch, np.random.default_rng(1).normal(size=arch.nparams),
                      np.random.default_rng(2).uniform(-5, 5, (200, 2)))
        assert np.all(out >= 0.01)

    def test_softplus_large_inputs(self):
        arch = MLPArch((1, 1, 1), "softplus")
        out = forward(arch, np.array([1.0, 0.0, 1.0, 0.0]), np.array([[800.0], [-800.0]]))
        assert np.all(np.isfinite(out)) and out[0, 0] == pytest.approx(800.0)


class TestGradients:
    @given(seed=st.integers(0, 2 ** 31), which=st.integers(0, len(ARCHS) - 1))
    @settings(max_examples=25, deadline=None)
    def test_vjp_matches_finite_differences(self, seed, which):
        arch = ARCHS[which]
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=arch.nparams)
        X = rng.uniform(-1, 1, (6, arch.n_in))
        cot = rng.normal(size=(6, arch.n_out))
        g = vjp_params(arch, theta, X, cot)
        for i in rng.choice(arch.nparams, min(5, arch.nparams), replace=False):
            e = np.zeros(arch.nparams)
            e[i] = 1e-6
            fd = np.sum(cot * (forward(arch, theta + e, X) - forward(arch, theta - e, X))) / 2e-6
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_cotangent_shape(self):
        arch = ARCHS[0]
        with pytest.raises(NetworkError):
            vjp_params(arch, glorot_init(arch, 0), np.zeros((3, 2)), np.zeros((3, 3)))

    @pytest.mark.parametrize("arch", ARCHS[:3])
    def test_input_derivatives(self, arch):
        rng = np.random.default_rng(4)
        theta = rng.normal(size=arch.nparams)
        X = rng.uniform(-1, 1, (5, arch.n_in))
        v, J, H = input_derivatives(arch, theta, X)
        assert np.allclose(v, forward(arch, theta, X), atol=1e-14)
        h = 1e-5
        for d in range(arch.n_in):
            e = np.zeros(arch.n_in)
            e[d] = h
            fp, fm = forward(arch, theta, X + e), forward(arch, theta, X - e)
            assert np.allclose(J[..., d], (fp - fm) / (2 * h), atol=1e-8)
            Jp = input_derivatives(arch, theta, X + e)[1]
            Jm = input_derivatives(arch, theta, X - e)[1]
            assert np.allclose(H[..., d], (Jp - Jm) / (2 * h), atol=1e-7)

    def test_hessian_symmetric(self):
        arch = ARCHS[2]
        H = input_derivatives(arch, glorot_init(arch, 3), np.random.default_rng(0).normal(size=(4, 3)))[2]
        assert np.allclose(H, np.swapaxes(H, -1, -2), atol=1e-14)


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_round_trip(self, tmp_path, arch):
        theta = np.random.default_rng(0).normal(size=arch.nparams)
        path = tmp_path / "net.cfnn"
        save_checkpoint(path, arch, theta)
        arch2, theta2 = load_checkpoint(path)
        assert arch2 == arch and np.array_equal(theta2, theta)

    def test_layout(self, tmp_path):
        arch = MLPArch((2, 3, 1), "softplus", rectify=True)
        path = tmp_path / "net.cfnn"
        save_checkpoint(path, arch, np.arange(arch.nparams, dtype=float))
        raw = path.read_bytes()
        assert raw[:4] == b"CFNN" and raw[4:8] == bytes([1, 1, 1, 3])
        assert len(raw) == 8 + 12 + 8 + 8 * arch.nparams

    def test_rejects_bad_files(self, tmp_path):
        arch = ARCHS[0]
        path = tmp_path / "net.cfnn"
        save_checkpoint(path, arch, glorot_init(arch, 0))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(NetworkError, match="truncated"):
            load_checkpoint(path)
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(NetworkError):
            load_checkpoint(path)
        path.write_bytes(raw[:4] + bytes([9]) + raw[5:])
        with pytest.raises(NetworkError, match="version"):
            load_checkpoint(path)

    def test_mismatched_save(self, tmp_path):
        with pytest.raises(NetworkError):
            save_checkpoint(tmp_path / "x", ARCHS[0], np.zeros(3))
