"""Float64 numerics substrate: seeded sampling, optimizers, finite differences.

Everything downstream builds on numpy float64 arrays and the `Rng` stream
defined here. Determinism contract: every random quantity in the repository
is drawn through an `Rng`, whose exact state is a pair of unsigned 64-bit
integers (seed, offset), so it can be captured in a checkpoint and restored
bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rng",
    "gaussian_sample",
    "SgdMomentum",
    "Adam",
    "finite_diff_grad",
    "FiniteDifferenceError",
]

_U64 = 0xFFFFFFFFFFFFFFFF
_DOUBLE_UNIT = 2.0 ** -53


def _mix64(x: int) -> int:
    """SplitMix64 finalizer: a bijective 64-bit mixing function."""
    x = (x + 0x9E3779B97F4A7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


class Rng:
    """Deterministic random stream with an exactly serializable state.

    Uniform bits come from numpy's PCG64 bit generator, whose raw stream is
    frozen by numpy's backward-compatibility policy. We count every consumed
    64-bit word, so the full state is (seed, offset) and restoring is
    reseed-then-advance. Distribution transforms are implemented here:

    - uniforms in [0, 1) take the top 53 bits of a word,
    - normals use the Box-Muller transform on uniform pairs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self._bits = np.random.PCG64(self.seed)
        self.offset = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, offset={self.offset})"

    def state(self) -> tuple[int, int]:
        return (self.seed, self.offset)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "Rng":
        rng = cls(state[0])
        rng._bits.advance(int(state[1]))
        rng.offset = int(state[1])
        return rng

    def child(self, index: int) -> "Rng":
        """Independent sub-stream derived from (seed, index); does not
        consume from this stream."""
        return Rng(_mix64(self.seed ^ _mix64(int(index) & _U64)))

    def _raw(self, n: int) -> np.ndarray:
        words = self._bits.random_raw(n)
        self.offset += int(n)
        return np.asarray(words, dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)) * _DOUBLE_UNIT

    def normal(self, *shape: int) -> np.ndarray:
        """Standard-normal draws of the given shape via Box-Muller.

        Always consumes 2*ceil(n/2) uniforms for n outputs, so the stream
        position is a function of the request sizes alone.
        """
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[:pairs], u[pairs:]
        radius = np.sqrt(-2.0 * np.log1p(-u1))  # u1 in [0,1) keeps the log finite
        angle = (2.0 * math.pi) * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return z.reshape(shape) if shape else z[0]

    def permutation(self, n: int) -> np.ndarray:
        """Uniform-ish permutation of range(n) by sorting uniform keys."""
        return np.argsort(self.uniform(n), kind="stable")


def gaussian_sample(rng: Rng, dim: int) -> np.ndarray:
    """dim i.i.d. standard-normal draws; advances rng deterministically."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return rng.normal(dim)


def _check_shapes(params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    if set(params) != set(grads):
        raise ValueError(
            f"param/grad key mismatch: {sorted(set(params) ^ set(grads))}"
        )
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: param {p.shape}, grad {grads[name].shape}"
            )


@dataclass
class SgdMomentum:
    """SGD with classical momentum and coupled weight decay.

    Update: v <- momentum*v + g + weight_decay*p, then p <- p - lr*v.
    """

    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_shapes(params, grads)
        for name in sorted(params):
            p = params[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + grads[name] + self.weight_decay * p
            self.velocity[name] = v
            p -= self.lr * v
        self.step_count += 1


@dataclass
class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_shapes(params, grads)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class FiniteDifferenceError(RuntimeError):
    """Loss evaluated to a non-finite value during a finite-difference probe."""

    def __init__(self, name: str, index: tuple[int, ...], value: float):
        super().__init__(
            f"non-finite loss {value!r} while perturbing {name!r} at index {index}"
        )
        self.name = name
        self.index = index


def finite_diff_grad(
    loss_fn,
    params: dict[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar loss, per coordinate.

    `loss_fn` must be a pure function of `params` (it is called with the same
    dict whose entries are perturbed in place and restored exactly).
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    grads = {}
    for name in sorted(params):
        p = params[name]
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            f_plus = float(loss_fn(params))
            p[idx] = orig - step
            f_minus = float(loss_fn(params))
            p[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                bad = f_plus if not math.isfinite(f_plus) else f_minus
                raise FiniteDifferenceError(name, idx, bad)
            g[idx] = (f_plus - f_minus) / (2.0 * step)
            it.iternext()
        grads[name] = g
    return grads
