"""Trust-region policy optimisation over observation-conditioned policies.

Advantages and values are computed on true states; the policy, its
importance ratios and the KL constraint are evaluated on the observations
the robot actually received.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .episode import EpisodeBatch, GaussianPolicyAgent, SimConfig, collect_batch
from .nets import NonFiniteError, PolicyNet, SigmaSchedule, ValueNet, fisher_vector_product, kl_diag_gauss, log_prob
from .world import EnvironmentSpec, TerminationCause, scale_vector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrpoConfig:
    gamma: float = 0.995
    lam: float = 0.96
    kl_coeff: float = 0.01  # trust region radius is kl_coeff / sigma
    eps1: float = 0.1
    cg_iters: int = 10
    cg_damping: float = 0.1
    cg_tol: float = 1e-10
    backtracks: int = 10
    value_passes: int = 5
    value_lr: float = 0.5
    value_shrinks: int = 10
    normalize_advantages: bool = True
    log_ratio_clip: float = 20.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if not self.kl_coeff > 0 or not self.eps1 > 0:
            raise ValueError("step sizes must be positive")

    def epsilon(self, sigma: float) -> float:
        return self.kl_coeff / sigma


# -- advantages ------------------------------------------------------------------

@dataclass
class AdvantageSet:
    advantages: np.ndarray  # flat, episode-major
    returns: np.ndarray  # empirical discounted return from each step

    def __len__(self) -> int:
        return len(self.advantages)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Backward GAE recursion. ``values`` has one more entry than ``rewards``
    (the value of the state reached after the last step)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    deltas = rewards + gamma * values[1:] - values[:-1]
    adv = np.empty_like(deltas)
    acc = 0.0
    for i in range(len(deltas) - 1, -1, -1):
        acc = deltas[i] + gamma * lam * acc
        adv[i] = acc
    return adv


def compute_gae(batch: EpisodeBatch, values: Sequence[np.ndarray], config: TrpoConfig) -> AdvantageSet:
    """``values[k]`` holds V(s_0..s_T) for episode ``k``; the terminal state's
    value is replaced by 0 unless the episode was truncated."""
    advs, rets = [], []
    for ep, v in zip(batch.episodes, values):
        v = np.array(v, dtype=float)
        if len(v) != len(ep) + 1:
            raise ValueError("need one value per state including the final one")
        if not ep.truncated:
            v[-1] = 0.0
        advs.append(gae(ep.rewards, v, config.gamma, config.lam))
        rets.append(discounted_returns(ep.rewards, config.gamma))
    return AdvantageSet(np.concatenate(advs), np.concatenate(rets))


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# -- packed batches -----------------------------------------------------------------

@dataclass
class PackedBatch:
    """Padded ``(T, B, .)`` arrays for recurrent evaluation; flat arrays are
    episode-major and ``mask`` marks valid steps."""

    X: np.ndarray
    A: np.ndarray
    logp_old: np.ndarray
    mask: np.ndarray
    index: tuple[np.ndarray, np.ndarray]  # (t, b) of each flat sample
    states: np.ndarray  # (N, D) scaled true states s_0..s_{T-1}
    final_states: np.ndarray  # (K, D) scaled states after the last step
    n: int

    def scatter(self, flat: np.ndarray) -> np.ndarray:
        out = np.zeros(self.mask.shape)
        out[self.index] = flat
        return out


def pack_batch(batch: EpisodeBatch, sim: SimConfig) -> PackedBatch:
    eps = batch.episodes
    T = max(len(e) for e in eps)
    B = len(eps)
    D = eps[0].observations.shape[1]
    X = np.zeros((T, B, D))
    A = np.zeros((T, B, 2))
    lp = np.zeros((T, B))
    mask = np.zeros((T, B))
    ts, bs = [], []
    for b, e in enumerate(eps):
        n = len(e)
        X[:n, b] = scale_vector(e.observations, sim.sensor, sim.limits, sim.goal_scale)
        A[:n, b] = e.actions
        lp[:n, b] = e.logp
        mask[:n, b] = 1.0
        ts.append(np.arange(n))
        bs.append(np.full(n, b))
    scale = lambda v: scale_vector(v, sim.sensor, sim.limits, sim.goal_scale)
    states = scale(np.concatenate([e.states[:-1] for e in eps]))
    finals = scale(np.stack([e.states[-1] for e in eps]))
    return PackedBatch(X, A, lp, mask, (np.concatenate(ts), np.concatenate(bs)), states, finals, int(mask.sum()))


# -- surrogate and KL -----------------------------------------------------------------

def _ratio(mu, packed: PackedBatch, sigma: float, clip: float):
    log_ratio = log_prob(mu, sigma, packed.A) - packed.logp_old
    clipped = np.clip(log_ratio, -clip, clip)
    return np.exp(clipped) * packed.mask, (np.abs(log_ratio) < clip)


def surrogate_from_mu(mu, packed: PackedBatch, adv_padded, sigma: float, clip: float = 20.0):
    """Importance-weighted mean advantage and its gradient w.r.t. ``mu``."""
    ratio, live = _ratio(mu, packed, sigma, clip)
    w = ratio * adv_padded / packed.n
    value = float(np.sum(w))
    dmu = (w * live)[..., None] * (packed.A - mu) / sigma**2
    return value, dmu


def surrogate_loss(net: PolicyNet, theta, packed: PackedBatch, adv_flat, sigma: float, clip: float = 20.0) -> float:
    mu, _ = net.forward(theta, packed.X)
    return surrogate_from_mu(mu, packed, packed.scatter(adv_flat), sigma, clip)[0]


def surrogate_grad(net: PolicyNet, theta, packed: PackedBatch, adv_flat, sigma: float, clip: float = 20.0):
    mu, cache = net.forward(theta, packed.X)
    value, dmu = surrogate_from_mu(mu, packed, packed.scatter(adv_flat), sigma, clip)
    return value, net.backward(cache, dmu)


def mean_kl_from_mu(mu_old, mu, packed: PackedBatch, sigma: float) -> float:
    return float(np.sum(kl_diag_gauss(mu_old, sigma, mu, sigma) * packed.mask) / packed.n)


def mean_kl(net: PolicyNet, theta_old, theta, packed: PackedBatch, sigma: float) -> float:
    mu_old, _ = net.forward(theta_old, packed.X)
    mu, _ = net.forward(theta, packed.X)
    return mean_kl_from_mu(mu_old, mu, packed, sigma)


# -- conjugate gradient -------------------------------------------------------------

def conjugate_gradient(apply_a: Callable[[np.ndarray], np.ndarray], b, iters: int = 10, tol: float = 1e-10):
    """Solve ``A x = b`` for symmetric positive-definite ``A`` given as a product.

    Stops when ``|r| / |b| <= tol`` or after ``iters`` iterations.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    bnorm = math.sqrt(b @ b)
    if bnorm == 0.0:
        return x
    for _ in range(iters):
        if math.sqrt(rr) <= tol * bnorm:
            break
        ap = apply_a(p)
        alpha = rr / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"conjugate gradient diverged (p.Ap = {p @ ap!r})")
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


# -- policy update ------------------------------------------------------------------

@dataclass
class UpdateInfo:
    accepted: bool
    epsilon: float
    mean_kl: float = 0.0
    surrogate_before: float = 0.0
    surrogate_after: float = 0.0
    step_fraction: float = 0.0
    grad_norm: float = 0.0
    direction_dot_grad: float = 0.0

    @property
    def improvement(self) -> float:
        return self.surrogate_after - self.surrogate_before


def trpo_update(
    net: PolicyNet,
    theta_old: np.ndarray,
    packed: PackedBatch,
    adv_flat: np.ndarray,
    config: TrpoConfig,
    sigma: float,
) -> tuple[np.ndarray, UpdateInfo]:
    """One natural-gradient step constrained to ``mean KL <= kl_coeff / sigma``.

    A step is accepted only if it satisfies the KL bound and strictly improves
    the surrogate; otherwise the old parameters are returned unchanged.
    """
    eps = config.epsilon(sigma)
    clip = config.log_ratio_clip
    adv_padded = packed.scatter(adv_flat)
    mu_old, cache = net.forward(theta_old, packed.X)
    surr_old, dmu = surrogate_from_mu(mu_old, packed, adv_padded, sigma, clip)
    g = net.backward(cache, dmu)
    info = UpdateInfo(False, eps, 0.0, surr_old, surr_old, 0.0, float(np.linalg.norm(g)))
    if info.grad_norm < 1e-12:
        return theta_old.copy(), info

    weights = packed.mask / packed.n

    def fvp(v):
        return fisher_vector_product(net, cache, weights, sigma, v, config.cg_damping)

    d = conjugate_gradient(fvp, g, config.cg_iters, config.cg_tol)
    info.direction_dot_grad = float(d @ g)
    shs = float(d @ fvp(d))
    if not shs > 0:
        return theta_old.copy(), info
    full = math.sqrt(2.0 * eps / shs) * d
    frac = 1.0
    for _ in range(config.backtracks + 1):
        theta = theta_old + frac * full
        mu, _ = net.forward(theta, packed.X)
        kl = mean_kl_from_mu(mu_old, mu, packed, sigma)
        surr, _ = surrogate_from_mu(mu, packed, adv_padded, sigma, clip)
        if np.isfinite(kl) and np.isfinite(surr) and kl <= eps and surr > surr_old:
            info.accepted = True
            info.mean_kl, info.surrogate_after, info.step_fraction = kl, surr, frac
            return theta, info
        frac *= 0.5
    return theta_old.copy(), info


# -- value regression -----------------------------------------------------------------

@dataclass
class ValueFitInfo:
    loss_before: float
    loss_after: float
    accepted_steps: int
    constraint: float


def fit_value(vnet: ValueNet, zeta_old, states, returns, config: TrpoConfig) -> tuple[np.ndarray, ValueFitInfo]:
    """Gradient-descent passes on the squared-error regression, each step
    shrunk until it lowers the loss and keeps the summed value displacement
    below ``eps1`` times twice the old loss."""
    returns = np.asarray(returns, dtype=float)
    v_old = vnet(zeta_old, states)
    j_old = float(np.sum((v_old - returns) ** 2))
    info = ValueFitInfo(j_old, j_old, 0, 0.0)
    if not np.isfinite(j_old):
        log.warning("non-finite value loss; keeping previous value parameters")
        return zeta_old.copy(), info
    if j_old == 0.0:
        return zeta_old.copy(), info
    n = len(returns)
    zeta = zeta_old.copy()
    j_cur = j_old
    for _ in range(config.value_passes):
        v, cache = vnet.forward(zeta, states)
        grad = vnet.backward(cache, 2.0 * (v - returns))
        lr = config.value_lr / (n * vnet.scale**2)
        for _ in range(config.value_shrinks):
            trial = zeta - lr * grad
            v_try = vnet(trial, states)
            j_try = float(np.sum((v_try - returns) ** 2))
            c = float(np.sum(np.abs(v_try - v_old)) / (2.0 * j_old))
            if np.isfinite(j_try) and j_try < j_cur and c <= config.eps1:
                zeta, j_cur = trial, j_try
                info.accepted_steps += 1
                info.constraint = c
                break
            lr *= 0.5
        else:
            break
    info.loss_after = j_cur
    return zeta, info


# -- training loop ---------------------------------------------------------------------

METRIC_COLUMNS = (
    "iter", "sigma", "epsilon", "mean_return", "mean_discounted_return", "mean_episode_len",
    "rate_RG", "rate_HC", "rate_HP", "rate_HO", "rate_LC", "mean_kl", "surrogate_improvement",
)

_RATE_CAUSES = {
    "rate_RG": TerminationCause.GOAL_REACHED,
    "rate_HC": TerminationCause.HIT_COMPANION,
    "rate_HP": TerminationCause.HIT_PEDESTRIAN,
    "rate_HO": TerminationCause.HIT_OBSTACLE,
    "rate_LC": TerminationCause.STRAY,
}


def batch_metrics(batch: EpisodeBatch, gamma: float) -> dict[str, float]:
    eps = batch.episodes
    out = {
        "mean_return": float(np.mean([e.rewards.sum() for e in eps])),
        "mean_discounted_return": float(np.mean([e.discounted_return(gamma) for e in eps])),
        "mean_episode_len": float(np.mean([len(e) for e in eps])),
    }
    for col, cause in _RATE_CAUSES.items():
        out[col] = 100.0 * sum(e.cause is cause for e in eps) / len(eps)
    return out


def format_metrics_row(row: dict) -> str:
    vals = []
    for c in METRIC_COLUMNS:
        v = row[c]
        vals.append(str(v) if c == "iter" else repr(float(v)))
    return ",".join(vals)


@dataclass
class IterationRecord:
    row: dict
    update: UpdateInfo
    value: ValueFitInfo
    theta_before: np.ndarray
    theta_after: np.ndarray


@dataclass
class TrainState:
    theta: np.ndarray
    zeta: np.ndarray
    iteration: int = 0
    history: list = field(default_factory=list)


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1)[0])


def initial_state(net: PolicyNet, vnet: ValueNet, seed: int) -> TrainState:
    """Fresh parameters drawn from a stream reserved for initialisation."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)).spawn(1)[0])
    return TrainState(net.init_params(rng), vnet.init_params(rng))


def train_loop(
    environments: Sequence[EnvironmentSpec],
    net: PolicyNet,
    vnet: ValueNet,
    state: TrainState,
    iters: int,
    *,
    batch_steps: int = 50_000,
    seed: int = 0,
    trpo: TrpoConfig = TrpoConfig(),
    sim: SimConfig = SimConfig(),
    schedule: SigmaSchedule = SigmaSchedule(),
    workers: int = 1,
    on_iteration: Optional[Callable[[TrainState, IterationRecord], None]] = None,
    keep_params: bool = False,
) -> TrainState:
    """Collect, estimate advantages, update the policy, refit the value
    function; repeated ``iters`` times starting at ``state.iteration``."""
    for _ in range(iters):
        it = state.iteration
        sigma = schedule(it)
        agent = GaussianPolicyAgent(net, state.theta, sigma, sim)
        batch = collect_batch(environments, agent, batch_steps, iteration_seed(seed, it), sim, workers)
        packed = pack_batch(batch, sim)

        v_states = vnet(state.zeta, packed.states)
        v_final = vnet(state.zeta, packed.final_states)
        values, off = [], 0
        for k, ep in enumerate(batch.episodes):
            values.append(np.append(v_states[off : off + len(ep)], v_final[k]))
            off += len(ep)
        adv = compute_gae(batch, values, trpo)
        a = normalize(adv.advantages) if trpo.normalize_advantages else adv.advantages

        theta_before = state.theta
        theta_new, upd = trpo_update(net, state.theta, packed, a, trpo, sigma)
        zeta_new, vinfo = fit_value(vnet, state.zeta, packed.states, adv.returns, trpo)

        row = {"iter": it, "sigma": sigma, "epsilon": upd.epsilon}
        row.update(batch_metrics(batch, trpo.gamma))
        row["mean_kl"] = upd.mean_kl
        row["surrogate_improvement"] = upd.improvement
        record = IterationRecord(row, upd, vinfo,
                                 theta_before if keep_params else None, theta_new if keep_params else None)
        state.theta, state.zeta = theta_new, zeta_new
        state.iteration = it + 1
        state.history.append(record)
        log.info("iter %d sigma %.3f return %.1f RG %.0f%% kl %.4g accepted %s",
                 it, sigma, row["mean_discounted_return"], row["rate_RG"], upd.mean_kl, upd.accepted)
        if on_iteration is not None:
            on_iteration(state, record)
    return state
