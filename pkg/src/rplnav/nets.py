"""Recurrent Gaussian policy (MLP features -> LSTM -> mean) and value network.

Parameters live in flat float64 vectors; :class:`ParamLayout` maps them to
named views in a fixed canonical order. Gradients are exact reverse-mode
(backpropagation through the full episode); the Fisher-vector product uses
the Gauss-Newton form, which equals the mean-KL Hessian at the old
parameters because the action covariance does not depend on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SigmaSchedule:
    start: float = 0.5
    end: float = 0.05
    decay_iters: int = 100

    def __call__(self, iteration: int) -> float:
        if self.decay_iters <= 0 or iteration >= self.decay_iters:
            return self.end
        frac = iteration / self.decay_iters
        return self.start + (self.end - self.start) * frac


class ParamLayout:
    def __init__(self, shapes):
        self.names = [n for n, _ in shapes]
        self.shapes = dict(shapes)
        self.offsets = {}
        off = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            self.offsets[name] = (off, off + n)
            off += n
        self.size = off

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {flat.shape}")
        return {n: flat[a:b].reshape(self.shapes[n]) for n, (a, b) in self.offsets.items()}

    def flatten(self, params: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for n, (a, b) in self.offsets.items():
            arr = np.asarray(params[n], dtype=float)
            if arr.shape != self.shapes[n]:
                raise ValueError(f"{n}: expected shape {self.shapes[n]}, got {arr.shape}")
            out[a:b] = arr.ravel()
        return out


def _orthogonal(rng, shape, gain):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}")


class PolicyNet:
    """Observation sequence -> Gaussian mean sequence."""

    def __init__(self, in_dim: int = 21, hidden=(256, 64), lstm: int = 64, out_dim: int = 2):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.lstm = lstm
        self.out_dim = out_dim
        shapes = []
        prev = in_dim
        for k, h in enumerate(self.hidden):
            shapes += [(f"feat{k}.W", (h, prev)), (f"feat{k}.b", (h,))]
            prev = h
        H = lstm
        shapes += [("lstm.W", (4 * H, prev)), ("lstm.U", (4 * H, H)), ("lstm.b", (4 * H,))]
        shapes += [("out.W", (out_dim, H)), ("out.b", (out_dim,))]
        self.layout = ParamLayout(shapes)

    @property
    def size(self) -> int:
        return self.layout.size

    def init_params(self, rng, out_gain: float = 0.01) -> np.ndarray:
        p = {}
        prev = self.in_dim
        for k, h in enumerate(self.hidden):
            p[f"feat{k}.W"] = _orthogonal(rng, (h, prev), 1.0)
            p[f"feat{k}.b"] = np.zeros(h)
            prev = h
        H = self.lstm
        p["lstm.W"] = np.vstack([_orthogonal(rng, (H, prev), 1.0) for _ in range(4)])
        p["lstm.U"] = np.vstack([_orthogonal(rng, (H, H), 1.0) for _ in range(4)])
        p["lstm.b"] = np.zeros(4 * H)
        p["out.W"] = _orthogonal(rng, (self.out_dim, H), out_gain)
        p["out.b"] = np.zeros(self.out_dim)
        return self.layout.flatten(p)

    def initial_state(self, batch: int = 1):
        return np.zeros((batch, self.lstm)), np.zeros((batch, self.lstm))

    def step(self, theta, x, state):
        """One recurrent step for a ``(B, in_dim)`` input. Returns ``(mu, state')``."""
        p = self.layout.unflatten(theta) if not isinstance(theta, dict) else theta
        h = np.atleast_2d(x)
        for k in range(len(self.hidden)):
            h = np.tanh(h @ p[f"feat{k}.W"].T + p[f"feat{k}.b"])
        h_prev, c_prev = state
        H = self.lstm
        z = h @ p["lstm.W"].T + h_prev @ p["lstm.U"].T + p["lstm.b"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c = f * c_prev + i * g
        hh = o * np.tanh(c)
        mu = hh @ p["out.W"].T + p["out.b"]
        return mu, (hh, c)

    def forward(self, theta, X):
        """Run ``(T, B, in_dim)`` sequences from a zero recurrent state.

        Returns ``(mu, cache)`` with ``mu`` of shape ``(T, B, out_dim)``.
        """
        theta = np.asarray(theta, dtype=float)
        _check_finite(theta, "policy parameters")
        p = self.layout.unflatten(theta)
        X = np.asarray(X, dtype=float)
        T, B, _ = X.shape
        acts = [X.reshape(T * B, -1)]
        for k in range(len(self.hidden)):
            acts.append(np.tanh(acts[-1] @ p[f"feat{k}.W"].T + p[f"feat{k}.b"]))
        feat = acts[-1].reshape(T, B, -1)
        H = self.lstm
        zx = (feat @ p["lstm.W"].T) + p["lstm.b"]
        U = p["lstm.U"]
        gates = np.empty((T, B, 4 * H))
        cs = np.empty((T + 1, B, H))
        hs = np.empty((T + 1, B, H))
        cs[0] = 0.0
        hs[0] = 0.0
        for t in range(T):
            z = zx[t] + hs[t] @ U.T
            gt = gates[t]
            gt[:, : 2 * H] = _sigmoid(z[:, : 2 * H])
            gt[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
            gt[:, 3 * H :] = _sigmoid(z[:, 3 * H :])
            cs[t + 1] = gt[:, H : 2 * H] * cs[t] + gt[:, :H] * gt[:, 2 * H : 3 * H]
            hs[t + 1] = gt[:, 3 * H :] * np.tanh(cs[t + 1])
        mu = hs[1:] @ p["out.W"].T + p["out.b"]
        cache = {"p": p, "acts": acts, "gates": gates, "cs": cs, "hs": hs, "T": T, "B": B}
        return mu, cache

    def backward(self, cache, dmu) -> np.ndarray:
        """Vector-Jacobian product: gradient of ``sum(dmu * mu)`` w.r.t. theta."""
        p, acts, gates, cs, hs = cache["p"], cache["acts"], cache["gates"], cache["cs"], cache["hs"]
        T, B, H = cache["T"], cache["B"], self.lstm
        dmu = np.asarray(dmu, dtype=float)
        g = {}
        g["out.W"] = np.einsum("tbo,tbh->oh", dmu, hs[1:])
        g["out.b"] = dmu.sum(axis=(0, 1))
        dhs_out = dmu @ p["out.W"]
        dz_all = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        U = p["lstm.U"]
        for t in range(T - 1, -1, -1):
            gt = gates[t]
            i, f, gg, o = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
            dh = dhs_out[t] + dh_next
            tc = np.tanh(cs[t + 1])
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dh_next = dz @ U
            dc_next = dc * f
        feat = acts[-1]
        dz_flat = dz_all.reshape(T * B, 4 * H)
        g["lstm.W"] = dz_flat.T @ feat
        g["lstm.U"] = np.einsum("tbz,tbh->zh", dz_all, hs[:-1])
        g["lstm.b"] = dz_flat.sum(axis=0)
        da = dz_flat @ p["lstm.W"]
        for k in range(len(self.hidden) - 1, -1, -1):
            a = acts[k + 1]
            dpre = da * (1.0 - a * a)
            g[f"feat{k}.W"] = dpre.T @ acts[k]
            g[f"feat{k}.b"] = dpre.sum(axis=0)
            da = dpre @ p[f"feat{k}.W"]
        grad = self.layout.flatten(g)
        _check_finite(grad, "policy gradient")
        return grad

    def jvp(self, cache, v) -> np.ndarray:
        """Jacobian-vector product: directional derivative of ``mu`` along ``v``."""
        p, acts, gates, cs, hs = cache["p"], cache["acts"], cache["gates"], cache["cs"], cache["hs"]
        T, B, H = cache["T"], cache["B"], self.lstm
        dp = self.layout.unflatten(np.asarray(v, dtype=float))
        da = np.zeros_like(acts[0])
        for k in range(len(self.hidden)):
            a = acts[k + 1]
            pre = da @ p[f"feat{k}.W"].T + acts[k] @ dp[f"feat{k}.W"].T + dp[f"feat{k}.b"]
            da = (1.0 - a * a) * pre
        feat = acts[-1].reshape(T, B, -1)
        dfeat = da.reshape(T, B, -1)
        dzx = dfeat @ p["lstm.W"].T + feat @ dp["lstm.W"].T + dp["lstm.b"]
        U, dU = p["lstm.U"], dp["lstm.U"]
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        dhs = np.empty((T, B, H))
        for t in range(T):
            gt = gates[t]
            i, f, gg, o = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
            dz = dzx[t] + dh @ U.T + hs[t] @ dU.T
            di = i * (1.0 - i) * dz[:, :H]
            df = f * (1.0 - f) * dz[:, H : 2 * H]
            dg = (1.0 - gg * gg) * dz[:, 2 * H : 3 * H]
            do = o * (1.0 - o) * dz[:, 3 * H :]
            dc = df * cs[t] + f * dc + di * gg + i * dg
            tc = np.tanh(cs[t + 1])
            dh = do * tc + o * (1.0 - tc * tc) * dc
            dhs[t] = dh
        return dhs @ p["out.W"].T + hs[1:] @ dp["out.W"].T + dp["out.b"]


class ValueNet:
    """State -> scalar value. Outputs are multiplied by ``scale`` so the
    hidden units work in O(1) units while values live in reward units."""

    def __init__(self, in_dim: int = 21, hidden=(256, 64, 16), scale: float = 1e4):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.scale = float(scale)
        shapes = []
        prev = in_dim
        for k, h in enumerate(self.hidden):
            shapes += [(f"v{k}.W", (h, prev)), (f"v{k}.b", (h,))]
            prev = h
        shapes += [("vout.W", (1, prev)), ("vout.b", (1,))]
        self.layout = ParamLayout(shapes)

    @property
    def size(self) -> int:
        return self.layout.size

    def init_params(self, rng, out_gain: float = 0.01) -> np.ndarray:
        p = {}
        prev = self.in_dim
        for k, h in enumerate(self.hidden):
            p[f"v{k}.W"] = _orthogonal(rng, (h, prev), 1.0)
            p[f"v{k}.b"] = np.zeros(h)
            prev = h
        p["vout.W"] = _orthogonal(rng, (1, prev), out_gain)
        p["vout.b"] = np.zeros(1)
        return self.layout.flatten(p)

    def forward(self, zeta, S):
        p = self.layout.unflatten(np.asarray(zeta, dtype=float))
        acts = [np.atleast_2d(np.asarray(S, dtype=float))]
        for k in range(len(self.hidden)):
            acts.append(np.tanh(acts[-1] @ p[f"v{k}.W"].T + p[f"v{k}.b"]))
        out = (acts[-1] @ p["vout.W"].T + p["vout.b"])[:, 0] * self.scale
        return out, {"p": p, "acts": acts}

    def __call__(self, zeta, S) -> np.ndarray:
        return self.forward(zeta, S)[0]

    def backward(self, cache, dv) -> np.ndarray:
        p, acts = cache["p"], cache["acts"]
        dout = (np.asarray(dv, dtype=float) * self.scale)[:, None]
        g = {"vout.W": dout.T @ acts[-1], "vout.b": dout.sum(axis=0)}
        da = dout @ p["vout.W"]
        for k in range(len(self.hidden) - 1, -1, -1):
            a = acts[k + 1]
            dpre = da * (1.0 - a * a)
            g[f"v{k}.W"] = dpre.T @ acts[k]
            g[f"v{k}.b"] = dpre.sum(axis=0)
            da = dpre @ p[f"v{k}.W"]
        grad = self.layout.flatten(g)
        _check_finite(grad, "value gradient")
        return grad


# -- Gaussian head ---------------------------------------------------------------

def sample_action(mu, sigma: float, rng) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    return mu + sigma * rng.standard_normal(mu.shape)


def log_prob(mu, sigma: float, a) -> np.ndarray:
    """Log-density of an isotropic 2-D Gaussian, vectorised over leading axes."""
    diff = np.asarray(a, dtype=float) - np.asarray(mu, dtype=float)
    k = diff.shape[-1]
    return -0.5 * np.sum(diff * diff, axis=-1) / sigma**2 - k * math.log(sigma) - 0.5 * k * LOG_2PI


def kl_diag_gauss(mu1, sigma1, mu2, sigma2) -> np.ndarray:
    """KL(N(mu1, sigma1^2 I) || N(mu2, sigma2^2 I)) over the last axis."""
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    s1 = np.broadcast_to(np.asarray(sigma1, dtype=float), mu1.shape)
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), mu2.shape)
    diff = mu1 - mu2
    terms = np.log(s2 / s1) + (s1**2 + diff**2) / (2.0 * s2**2) - 0.5
    return np.sum(terms, axis=-1)


def grad_flat(net: PolicyNet, theta, X, objective):
    """Value and exact gradient of ``objective(mu)`` w.r.t. the flat parameters.

    ``objective`` maps the ``(T, B, 2)`` mean array to ``(value, d value / d mu)``.
    """
    mu, cache = net.forward(theta, X)
    value, dmu = objective(mu)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite objective")
    return value, net.backward(cache, dmu)


def fisher_vector_product(net: PolicyNet, cache, weights, sigma: float, v, damping: float = 0.0) -> np.ndarray:
    """``(H + damping I) v`` with ``H`` the Hessian of the weighted mean KL at the
    cached (old) parameters. ``weights`` is ``(T, B)``: mask divided by the
    number of valid steps."""
    v = np.asarray(v, dtype=float)
    jv = net.jvp(cache, v)
    return net.backward(cache, jv * (weights[..., None] / sigma**2)) + damping * v
