"""Fully connected networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector, packed layer by layer: for each
layer the weight matrix W (n_out x n_in, row-major) followed by the bias b.
Hidden layers apply the activation; the output layer is affine, optionally
followed by the rectifier r(z) = |z| + 0.01.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("tanh", "softplus", "identity")
RECTIFIER_SHIFT = 0.01
_MAGIC = b"CFNN"
_VERSION = 1


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class MLPArch:
    sizes: tuple
    activation: str = "tanh"
    rectify: bool = False

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise NetworkError(f"invalid layer sizes {sizes}")
        if len(set(sizes[1:-1])) > 1:
            raise NetworkError(f"hidden layers must have equal widths, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")

    @classmethod
    def build(cls, n_in, n_out, depth, width, activation="tanh", rectify=False):
        return cls((n_in,) + (width,) * depth + (n_out,), activation, rectify)

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    @property
    def nparams(self):
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def layers(self, theta):
        """(W, b) views into ``theta`` for every layer."""
        theta = np.asarray(theta)
        if theta.shape != (self.nparams,):
            raise NetworkError(f"expected {self.nparams} parameters, got {theta.shape}")
        out, pos = [], 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = theta[pos:pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            out.append((W, theta[pos:pos + n_out]))
            pos += n_out
        return out


def glorot_init(arch, seed):
    """Glorot-uniform weights and zero biases.

    Draws come from ``numpy.random.default_rng(seed)`` (PCG64), one
    ``uniform`` call per weight matrix in layer order.
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.nparams)
    for W, _ in arch.layers(theta):
        n_out, n_in = W.shape
        lim = np.sqrt(6.0 / (n_in + n_out))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
    return theta


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _act_d1(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "softplus":
        return expit(z)
    return np.ones_like(z)


def _act_d2(name, z, a):
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    if name == "softplus":
        s = expit(z)
        return s * (1.0 - s)
    return np.zeros_like(z)


def _check_input(arch, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.n_in:
        raise NetworkError(f"inputs must have shape (n, {arch.n_in}), got {X.shape}")
    return X


def forward(arch, theta, X, return_cache=False):
    """Network outputs (n, n_out) at the rows of ``X``."""
    X = _check_input(arch, X)
    layers = arch.layers(theta)
    a = X
    cache = [X]
    for W, b in layers[:-1]:
        z = a @ W.T + b
        a = _act(arch.activation, z)
        cache.append((z, a))
    W, b = layers[-1]
    z = a @ W.T + b
    out = np.abs(z) + RECTIFIER_SHIFT if arch.rectify else z
    cache.append(z)
    return (out, cache) if return_cache else out


def vjp_params(arch, theta, X, cotangent, cache=None):
    """sum over rows of (d output_row / d theta)^T cotangent_row."""
    if cache is None:
        _, cache = forward(arch, theta, X, return_cache=True)
    layers = arch.layers(theta)
    cot = np.asarray(cotangent, dtype=float)
    n = cache[0].shape[0]
    if cot.shape != (n, arch.n_out):
        raise NetworkError(f"cotangent must have shape {(n, arch.n_out)}, got {cot.shape}")
    grad = np.zeros(arch.nparams)
    glayers = arch.layers(grad)
    delta = cot * np.sign(cache[-1]) if arch.rectify else cot
    for ell in range(len(layers) - 1, -1, -1):
        a_prev = cache[0] if ell == 0 else cache[ell][1]
        gW, gb = glayers[ell]
        gW[...] = delta.T @ a_prev
        gb[...] = delta.sum(axis=0)
        if ell == 0:
            break
        z, a = cache[ell]
        delta = (delta @ layers[ell][0]) * _act_d1(arch.activation, z, a)
    return grad


def input_derivatives(arch, theta, X):
    """Outputs with their input Jacobian and Hessian by forward-mode propagation.

    Returns values (n, n_out), jac (n, n_out, n_in) and
    hess (n, n_out, n_in, n_in). The rectifier's kink is treated as a
    point of zero second derivative.
    """
    X = _check_input(arch, X)
    layers = arch.layers(theta)
    n, d = X.shape
    a = X
    da = np.broadcast_to(np.eye(d), (n, d, d))  # (n, width, d)
    d2a = np.zeros((n, d, d, d))
    for ell, (W, b) in enumerate(layers):
        z = a @ W.T + b
        dz = np.einsum("oi,nid->nod", W, da)
        d2z = np.einsum("oi,nide->node", W, d2a)
        if ell == len(layers) - 1:
            break
        a = _act(arch.activation, z)
        s1 = _act_d1(arch.activation, z, a)
        s2 = _act_d2(arch.activation, z, a)
        d2a = s2[..., None, None] * dz[..., :, None] * dz[..., None, :] + s1[..., None, None] * d2z
        da = s1[..., None] * dz
    if arch.rectify:
        s = np.sign(z)
        return np.abs(z) + RECTIFIER_SHIFT, s[..., None] * dz, s[..., None, None] * d2z
    return z, dz, d2z


def save_checkpoint(path, arch, theta):
    """Write ``arch`` and ``theta`` in the little-endian checkpoint layout."""
    theta = np.asarray(theta, dtype="<f8")
    if theta.shape != (arch.nparams,):
        raise NetworkError("parameter vector does not match the architecture")
    header = _MAGIC + struct.pack("<BBBB", _VERSION, ACTIVATIONS.index(arch.activation),
                                  int(arch.rectify), len(arch.sizes))
    header += struct.pack(f"<{len(arch.sizes)}I", *arch.sizes)
    header += struct.pack("<Q", arch.nparams)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(theta.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise NetworkError(f"{path}: not a network checkpoint")
    version, act, rect, nlayers = struct.unpack_from("<BBBB", data, 4)
    if version != _VERSION:
        raise NetworkError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    sizes = struct.unpack_from(f"<{nlayers}I", data, pos)
    pos += 4 * nlayers
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    arch = MLPArch(sizes, ACTIVATIONS[act], bool(rect))
    if count != arch.nparams or len(data) - pos != 8 * count:
        raise NetworkError(f"{path}: truncated or inconsistent checkpoint")
    return arch, np.frombuffer(data, dtype="<f8", offset=pos).astype(float)
