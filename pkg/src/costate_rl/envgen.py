"""Randomized second-order mechanical tasks.

State vectors stack configuration and velocity, ``s = [q; v]`` with
``n_q = n_s / 2`` each. One Euler step is::

    s' = s + dt * [v; alpha(s, a) + sigma * xi]

The cost-rate is ``tanh(s^T B s)`` with ``B = diag(10, ..., 10, 0, ...)`` over
the first ``n_c`` elements. Only ``q[:k]`` and ``v[:k]`` (``k = n_C / 2``) can
influence the cost: the accelerations of those coordinates read nothing but
those elements and the action, so the relevant set is closed under the
dynamics. The remaining coordinates are distractors driven by the full state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DT = 0.1
HORIZON = 3.0
N_STEPS = 30
COST_WEIGHT = 10.0
SPECTRAL_BOUND = 1.5
TANH_GAIN = 5.0
# accelerations per unit action; see design notes in README
ACTION_GAIN = 10.0


class DivergenceError(FloatingPointError):
    """A state became non-finite."""


@dataclass(frozen=True)
class TaskSpec:
    n_s: int = 10
    n_c: int = 1
    n_C: int = 4
    dynamics: str = "linear"
    noise_sigma: float = 0.0
    seed: int = 0
    # scales the action columns of the relevant accelerations, linear tasks only
    action_gain: float = ACTION_GAIN

    def __post_init__(self):
        if self.n_s < 2 or self.n_s % 2:
            raise ValueError(f"n_s must be even and >= 2, got {self.n_s}")
        if self.n_C < 2 or self.n_C % 2 or self.n_C > self.n_s:
            raise ValueError(f"n_C must be even and in [2, n_s], got {self.n_C}")
        if not 1 <= self.n_c <= self.n_C // 2:
            raise ValueError(f"n_c must be in [1, n_C/2], got {self.n_c}")
        if self.dynamics not in ("linear", "tanh"):
            raise ValueError(f"unknown dynamics kind {self.dynamics!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def n_a(self) -> int:
        return self.n_C // 2

    @property
    def n_q(self) -> int:
        return self.n_s // 2

    @property
    def relevant(self) -> np.ndarray:
        """Indices of the state elements that can influence total cost."""
        k = self.n_C // 2
        return np.r_[0:k, self.n_q:self.n_q + k]


@dataclass(eq=False)
class Environment:
    spec: TaskSpec
    params: dict[str, np.ndarray]
    dt: float = DT
    horizon: float = HORIZON
    step_calls: int = field(default=0, compare=False)

    @property
    def n_s(self) -> int:
        return self.spec.n_s

    @property
    def n_a(self) -> int:
        return self.spec.n_a

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def b_diag(self) -> np.ndarray:
        b = np.zeros(self.spec.n_s)
        b[:self.spec.n_c] = COST_WEIGHT
        return b

    # dynamics

    def accel(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        p = self.params
        if self.spec.dynamics == "linear":
            return p["A"] @ s + p["G"] @ a
        rel = self.spec.relevant
        x_rel = np.vstack([s[rel], a])
        x_all = np.vstack([s, a])
        h_rel = np.tanh(p["W1r"] @ x_rel + p["b1r"][:, None])
        out = [p["W2r"] @ h_rel + p["b2r"][:, None]]
        if "W1d" in p:
            h_d = np.tanh(p["W1d"] @ x_all + p["b1d"][:, None])
            out.append(p["W2d"] @ h_d + p["b2d"][:, None])
        return TANH_GAIN * np.vstack(out)

    def f(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Noiseless state derivative ``[v; alpha(s, a)]``."""
        s, a = self._check(s, a)
        return np.vstack([s[self.spec.n_q:], self.accel(s, a)])

    def vjp(self, s: np.ndarray, a: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pull ``w`` (n_s, n_m) back through ``f``: returns ``(w @ df/ds, w @ df/da)``."""
        s, a = self._check(s, a)
        n_q = self.spec.n_q
        w_q, w_v = w[:n_q], w[n_q:]
        ws = np.zeros_like(s)
        ws[n_q:] += w_q
        p = self.params
        if self.spec.dynamics == "linear":
            ws += p["A"].T @ w_v
            return ws, p["G"].T @ w_v
        k = self.spec.n_C // 2
        rel = self.spec.relevant
        g = TANH_GAIN * w_v
        h_rel = np.tanh(p["W1r"] @ np.vstack([s[rel], a]) + p["b1r"][:, None])
        dx_rel = p["W1r"].T @ ((p["W2r"].T @ g[:k]) * (1.0 - h_rel**2))
        ws[rel] += dx_rel[:2 * k]
        wa = dx_rel[2 * k:].copy()
        if "W1d" in p:
            h_d = np.tanh(p["W1d"] @ np.vstack([s, a]) + p["b1d"][:, None])
            dx_d = p["W1d"].T @ ((p["W2d"].T @ g[k:]) * (1.0 - h_d**2))
            ws += dx_d[:self.spec.n_s]
            wa += dx_d[self.spec.n_s:]
        return ws, wa

    def step(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """One Euler step. Noise needs ``rng`` whenever ``noise_sigma > 0``."""
        s, a = self._check(s, a)
        self.step_calls += 1
        acc = self.accel(s, a)
        sigma = self.spec.noise_sigma
        if sigma > 0:
            if rng is None:
                raise ValueError("a noise stream is required when noise_sigma > 0")
            acc = acc + sigma * rng.standard_normal(acc.shape)
        n_q = self.spec.n_q
        out = s + self.dt * np.vstack([s[n_q:], acc])
        if not np.isfinite(out).all():
            raise DivergenceError("state became non-finite")
        return out

    # cost

    def cprime(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        n_c = self.spec.n_c
        return COST_WEIGHT * np.sum(s[:n_c] ** 2, axis=0, keepdims=True)

    def cost_rate(self, s: np.ndarray) -> np.ndarray:
        return np.tanh(self.cprime(s))

    def cprime_grad(self, s: np.ndarray) -> np.ndarray:
        return 2.0 * self.b_diag[:, None] * np.asarray(s, dtype=float)

    def cost_grad(self, s: np.ndarray) -> np.ndarray:
        """Exact d(cost_rate)/ds per column. The cost never depends on the action."""
        c = np.tanh(self.cprime(s))
        return (1.0 - c**2) * self.cprime_grad(s)

    def _check(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if s.ndim != 2 or s.shape[0] != self.spec.n_s:
            raise ValueError(f"state batch must have {self.spec.n_s} rows, got {s.shape}")
        if a.shape != (self.spec.n_a, s.shape[1]):
            raise ValueError(f"action batch must be ({self.spec.n_a}, {s.shape[1]}), got {a.shape}")
        return s, a

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(repr(self.spec).encode())
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        return h.hexdigest()


def _glorot(rng, n_out, n_in):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def make_task(spec: TaskSpec) -> Environment:
    rng = np.random.default_rng(spec.seed)
    n_s, n_q, n_a = spec.n_s, spec.n_q, spec.n_a
    k = spec.n_C // 2
    rel = spec.relevant
    if spec.dynamics == "linear":
        A = rng.standard_normal((n_q, n_s))
        # relevant accelerations read only relevant state elements
        mask = np.ones((n_q, n_s), dtype=bool)
        mask[:k] = False
        mask[np.ix_(np.arange(k), rel)] = True
        A = np.where(mask, A, 0.0)
        norm = np.linalg.norm(A, 2)
        if norm > SPECTRAL_BOUND:
            A *= SPECTRAL_BOUND / norm
        G = rng.standard_normal((n_q, n_a))
        G[:k] *= spec.action_gain
        params = {"A": A, "G": G}
    else:
        width = n_s
        params = {
            "W1r": _glorot(rng, width, 2 * k + n_a),
            "b1r": np.zeros(width),
            "W2r": _glorot(rng, k, width),
            "b2r": np.zeros(k),
        }
        if n_q > k:
            W1d = _glorot(rng, width, n_s + n_a)
            params.update(W1d=W1d, b1d=np.zeros(width), W2d=_glorot(rng, n_q - k, width), b2d=np.zeros(n_q - k))
    return Environment(spec, params)


def random_states(rng: np.random.Generator, n_s: int, n_m: int) -> np.ndarray:
    return 2.0 * (rng.random((n_s, n_m)) - 0.5)


def random_actions(rng: np.random.Generator, n_a: int, n_m: int) -> np.ndarray:
    return 2.0 * (rng.random((n_a, n_m)) - 0.5)
