"""Numeric kernel: seeded RNG, Glorot init, a dense MLP with exact gradients, Adam.

Everything is float64 numpy. The MLP returns a tape from each forward pass so
the matching backward pass can run without global state; the tape is only
valid for the network that produced it.
"""

import hashlib
import math

import numpy as np

from .errors import InternalError

Array = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Rng:
    """Deterministic random source: same seed, same call sequence, same numbers.

    Wraps numpy's Generator plus the SeedSequence it came from, so a stream can
    spawn independent child streams without consuming its own state.
    """

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.default_rng(self._seq)

    def spawn(self, n):
        """Return n child streams, independent of this one and of each other."""
        return [Rng(seq) for seq in self._seq.spawn(n)]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def shuffle(self, x):
        self._gen.shuffle(x)

    def sample_without_replacement(self, n, k):
        """Draw k distinct indices from range(n)."""
        if k > n:
            raise InternalError(f"cannot draw {k} distinct values from a pool of {n}")
        return self._gen.choice(n, size=k, replace=False)

    def categorical(self, weights):
        """Draw an index with probability proportional to weights."""
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InternalError("categorical weights must be a nonnegative finite vector")
        total = float(w.sum())
        if total <= 0.0:
            raise InternalError("categorical weights must not all be zero")
        cdf = np.cumsum(w)
        u = self._gen.uniform(0.0, total)
        return int(np.searchsorted(cdf, u, side="right"))


def derive_seed(*parts):
    """Stable 64-bit seed from the textual form of the given parts.

    Hashes with sha256 rather than hash() so the value survives process
    restarts and PYTHONHASHSEED changes; used to give sub-tasks (a training
    run, a fit round) their own reproducible streams.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def glorot_uniform(rng, rows, cols):
    """Matrix of shape (rows, cols) drawn uniformly in +/- sqrt(6 / (rows + cols))."""
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return float(out) if out.ndim == 0 else out


def softplus(x):
    """log(1 + exp(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=float)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if out.ndim == 0 else out


class _MlpTape:
    """Intermediate activations of one forward pass, consumed by backward()."""

    __slots__ = ("net", "acts", "zs", "single")

    def __init__(self, net, acts, zs, single):
        self.net = net
        self.acts = acts
        self.zs = zs
        self.single = single


class MlpNet:
    """Fully connected net with ReLU hidden layers and an identity output layer.

    Weights W_k have shape (fan_out, fan_in), biases start at zero. forward()
    maps (B, in) -> (B, out) (or a single vector to a single vector) and
    returns the output together with a tape; backward() consumes that tape and
    the gradient wrt the output, returning exact weight/bias/input gradients.
    """

    def __init__(self, sizes, rng):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise InternalError(f"MLP needs at least two positive layer sizes, got {sizes!r}")
        self.sizes = [int(s) for s in sizes]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            self.weights.append(glorot_uniform(rng, fan_out, fan_in))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def param_items(self, prefix):
        """(name, array) pairs for every weight and bias, names under prefix."""
        items = []
        for k in range(self.n_layers):
            items.append((f"{prefix}.w{k}", self.weights[k]))
            items.append((f"{prefix}.b{k}", self.biases[k]))
        return items

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.ndim != 2 or a.shape[1] != self.sizes[0]:
            raise InternalError(
                f"MLP input has shape {x.shape}, expected trailing dimension {self.sizes[0]}"
            )
        acts = [a]
        zs = []
        for k in range(self.n_layers):
            z = a @ self.weights[k].T + self.biases[k]
            zs.append(z)
            a = np.maximum(z, 0.0) if k < self.n_layers - 1 else z
            acts.append(a)
        tape = _MlpTape(self, acts, zs, single)
        return (a[0] if single else a), tape

    def backward(self, tape, dout):
        """Gradients for one forward pass: returns (dweights, dbiases, dinput)."""
        if not isinstance(tape, _MlpTape) or tape.net is not self:
            raise InternalError("tape does not belong to this network")
        dout = np.asarray(dout, dtype=float)
        if tape.single:
            dout = dout[None, :]
        if dout.shape != tape.acts[-1].shape:
            raise InternalError(
                f"output gradient has shape {dout.shape}, expected {tape.acts[-1].shape}"
            )
        dweights = [None] * self.n_layers
        dbiases = [None] * self.n_layers
        dz = dout
        dx = None
        for k in reversed(range(self.n_layers)):
            dweights[k] = dz.T @ tape.acts[k]
            dbiases[k] = dz.sum(axis=0)
            dx = dz @ self.weights[k]
            if k > 0:
                dz = dx * (tape.zs[k - 1] > 0.0)
        return dweights, dbiases, (dx[0] if tape.single else dx)


class AdamState:
    """First/second moment accumulators for a named parameter set."""

    def __init__(self, params):
        self.step = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}


def adam_step(params, grads, state, lr):
    """One in-place Adam update with bias correction.

    Parameters without a gradient this step are left untouched (their moments
    do not decay either); a gradient for an unknown name or with a mismatched
    shape is a bug and raises.
    """
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, g in grads.items():
        p = params.get(name)
        if p is None or name not in state.m:
            raise InternalError(f"gradient for unknown parameter {name!r}")
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise InternalError(
                f"gradient shape {g.shape} does not match parameter shape {p.shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clone_params(params):
    """Deep copy of a named parameter set."""
    return {name: p.copy() for name, p in params.items()}


def assign_params(params, source):
    """Copy source values into params in place, keeping array identity."""
    if set(params) != set(source):
        raise InternalError("parameter sets differ, cannot assign")
    for name, p in params.items():
        src = source[name]
        if src.shape != p.shape:
            raise InternalError(f"shape mismatch for {name!r}: {src.shape} vs {p.shape}")
        p[...] = src


def add_grad(grads, name, value):
    """Accumulate value into grads[name], creating the slot on first use."""
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=float, copy=True)
