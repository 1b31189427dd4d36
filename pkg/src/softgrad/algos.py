"""First-order policy optimization: SAPO, SHAC, APG, open-loop TrajOpt and gradient estimators."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from softgrad import nets
from softgrad import tape as T
from softgrad.envs.base import EnvBatch, Observation, Task, stack_states

log = logging.getLogger(__name__)

ALGORITHMS = ("sapo", "shac", "apg")


@dataclass
class AlgoConfig:
    algo: str = "sapo"
    num_envs: int = 16
    horizon: int = 32
    iterations: int = 100
    gamma: float = 0.99
    lam: float = 0.95
    actor_lr: float = 2e-3
    critic_lr: float = 5e-4
    entropy_lr: float = 5e-3
    lr_schedule: str = "linear"  # or "constant"
    betas: tuple = (0.7, 0.95)
    weight_decay: float = 0.01
    actor_grad_clip: float = 0.5
    critic_grad_clip: float = 0.5
    critic_updates: int = 16
    critic_minibatches: int = 1  # the whole N*H buffer is one batch
    critic_tau: float | None = None  # Polyak factor of a target critic; None disables it
    num_critics: int = 2
    actor_value: str = "mean"  # reduction over critics in the actor objective: mean | min
    target_value: str = "min"  # reduction over critics in TD targets
    init_temperature: float = 1.0
    target_entropy: float | None = None  # None: -act_dim / 2
    entropy_in_actor: bool = True
    entropy_in_targets: bool = True
    learn_temperature: bool = True
    bootstrap_on_timeout: bool = False
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    activation: str = "silu"
    state_dependent_sigma: bool = True
    log_std_bounds: tuple = (-5.0, 2.0)
    init_log_std: float = -1.0
    use_point_cloud: bool = True
    return_window: int = 0  # completed episodes averaged for return_mean; 0 means num_envs

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}, got {self.algo!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.actor_value not in ("mean", "min") or self.target_value not in ("mean", "min"):
            raise ValueError("value reductions must be 'mean' or 'min'")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError("lr_schedule must be 'linear' or 'constant'")


def preset(algo: str, **overrides) -> AlgoConfig:
    """Per-algorithm defaults; SHAC and APG drop entropy and use one critic."""
    base = dict(algo=algo)
    if algo in ("shac", "apg"):
        base.update(num_critics=1, entropy_in_actor=False, entropy_in_targets=False,
                    learn_temperature=False, init_temperature=0.0, activation="elu",
                    state_dependent_sigma=False, weight_decay=0.0, actor_grad_clip=1.0,
                    critic_grad_clip=1.0, critic_tau=0.995)
    if algo == "apg":
        base.update(critic_updates=0, critic_tau=None)
    base.update(overrides)
    return AlgoConfig(**base)


# ---------------------------------------------------------------------------
# entropy

def normalize_entropy(h, target_entropy):
    """Affine map sending -|H| -> 0 and +|H| -> 1."""
    if target_entropy == 0:
        raise ValueError("target entropy must be nonzero")
    a = abs(target_entropy)
    return (h + a) / (2.0 * a)


@dataclass
class TemperatureState:
    log_alpha: float
    target_entropy: float
    optimizer: nets.AdamW

    @property
    def alpha(self):
        return math.exp(self.log_alpha)


def make_temperature(init_alpha, target_entropy, lr, betas) -> TemperatureState:
    init = math.log(init_alpha) if init_alpha > 0 else -math.inf
    return TemperatureState(init, target_entropy, nets.AdamW(lr, betas))


def temperature_update(state: TemperatureState, h, lr=None) -> TemperatureState:
    """One Adam step on L = mean(alpha * (h - target)) through log alpha."""
    h = np.asarray(T.value(h), dtype=np.float64)
    if not np.isfinite(state.log_alpha):
        return state
    grad = state.alpha * float(np.mean(h - state.target_entropy))
    p = {"log_alpha": np.array(state.log_alpha)}
    state.optimizer.step(p, {"log_alpha": np.array(grad)}, lr=lr)
    state.log_alpha = float(p["log_alpha"])
    return state


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)  # s_t
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)  # (B,)
    dones: list = field(default_factory=list)
    boot: list = field(default_factory=list)  # 1 where V(s_{t+1}) may be bootstrapped after a done
    entropy: list = field(default_factory=list)  # raw h_t
    entropy_norm: list = field(default_factory=list)
    next_values: list = field(default_factory=list)  # [t][critic] -> (B,)
    next_obs: list = field(default_factory=list)  # s_{t+1} before any auto-reset
    cursor: int = 0
    detached: bool = False

    def __len__(self):
        return len(self.rewards)

    def append(self, obs, action, reward, done, boot, h, h_norm, values, next_obs):
        self.obs.append(obs)
        self.actions.append(action)
        self.rewards.append(reward)
        self.dones.append(np.asarray(done, dtype=bool))
        self.boot.append(np.asarray(boot, dtype=np.float64))
        self.entropy.append(h)
        self.entropy_norm.append(h_norm)
        self.next_values.append(list(values))
        self.next_obs.append(next_obs)

    def detach(self) -> "RolloutBuffer":
        v = T.value
        return RolloutBuffer(
            [o.detach() for o in self.obs], [v(a) for a in self.actions],
            [v(r) for r in self.rewards], [d.copy() for d in self.dones], [b.copy() for b in self.boot],
            [v(h) for h in self.entropy], [v(h) for h in self.entropy_norm],
            [[v(x) for x in vs] for vs in self.next_values], [o.detach() for o in self.next_obs],
            self.cursor, True)

    def stacked(self, name):
        return T.stack(getattr(self, name), axis=0)

    def values_stacked(self):
        """(C, H, B) next-state values."""
        C = len(self.next_values[0])
        return T.stack([T.stack([vs[i] for vs in self.next_values], axis=0) for i in range(C)], axis=0)


def _reduce(values, how):
    if len(values) == 1:
        return values[0]
    if how == "min":
        out = values[0]
        for v in values[1:]:
            out = T.minimum(out, v)
        return out
    out = values[0]
    for v in values[1:]:
        out = out + v
    return out * (1.0 / len(values))


def collect_rollout(env: EnvBatch, policy, actor_params, critics, critic_params, alpha, cfg: AlgoConfig,
                    rng: np.random.Generator, target_entropy: float, cursor: int = 0) -> RolloutBuffer:
    """H tape-connected environment steps under the stochastic policy."""
    buf = RolloutBuffer(cursor=cursor)
    obs = env.observe()
    for _ in range(cfg.horizon):
        noise = rng.standard_normal((env.num_envs, env.act_dim))
        a, logp = policy.sample(actor_params, obs, noise)
        h = nets.entropy_estimate(logp)
        h_norm = normalize_entropy(h, target_entropy)
        res = env.step(a)
        if critics is not None:
            values = critics(critic_params, res.terminal_obs)
        else:
            values = [np.zeros(env.num_envs)]
        boot = ~res.done | (cfg.bootstrap_on_timeout & ~res.terminated)
        buf.append(obs, a, res.reward, res.done, boot, h, h_norm, values, res.terminal_obs)
        if np.any(res.done):
            buf.cursor = 0
        obs = res.obs
    buf.cursor += cfg.horizon + 1
    return buf


# ---------------------------------------------------------------------------
# actor objectives

def _require_taped(buf):
    if buf.detached:
        raise ValueError("actor objective needs a tape-connected buffer")


def actor_objective_sapo(buf: RolloutBuffer, alpha: float, gamma: float, value_reduce="mean"):
    """Negated entropy-augmented H-step return plus discounted terminal soft value, mean over envs.

    The discount restarts at each episode boundary inside the window.
    """
    _require_taped(buf)
    H = len(buf)
    total = 0.0
    acc = 0.0
    g = np.ones(np.shape(T.value(buf.rewards[0])))
    for t in range(H):
        v = _reduce(buf.next_values[t], value_reduce)
        acc = acc + g * (buf.rewards[t] + alpha * buf.entropy_norm[t])
        d = buf.dones[t]
        if np.any(d):
            seg = acc + (g * gamma * buf.boot[t]) * v
            total = total + T.where(d, seg, 0.0)
            acc = T.where(d, 0.0, acc)
        if t == H - 1:
            total = total + acc + T.where(d, 0.0, (g * gamma) * v)
        g = np.where(d, 1.0, g * gamma)
    return -T.mean(total)


def _discounts(dones, gamma):
    """Exponent of gamma for each (t, b): steps since the episode started in the window."""
    H, B = dones.shape
    k = np.zeros((H, B))
    for t in range(1, H):
        k[t] = np.where(dones[t - 1], 0, k[t - 1] + 1)
    return gamma ** k


def actor_objective_shac(buf: RolloutBuffer, gamma: float):
    """Negated H-step return with a single critic's terminal value, mean over envs."""
    _require_taped(buf)
    dones = np.stack(buf.dones)
    w = _discounts(dones, gamma)
    r = buf.stacked("rewards")
    V = T.stack([vs[0] for vs in buf.next_values], axis=0)
    # a bootstrap enters at every episode end inside the window and at the window end
    ends = dones.copy()
    ends[-1] = True
    wv = np.where(ends, w * gamma, 0.0) * np.where(dones, np.stack(buf.boot), 1.0)
    J = T.sum(r * w, axis=0) + T.sum(V * wv, axis=0)
    return -T.mean(J)


def actor_objective_apg(buf: RolloutBuffer, gamma: float):
    """Negated discounted H-step return; no value bootstrap and no entropy."""
    _require_taped(buf)
    w = _discounts(np.stack(buf.dones), gamma)
    return -T.mean(T.sum(buf.stacked("rewards") * w, axis=0))


# ---------------------------------------------------------------------------
# value targets

def soft_td_lambda_targets(rewards, entropy_norm, next_values, dones, boot, alpha, gamma, lam):
    """Per-step soft TD(lambda) targets, computed backwards over the window.

    ``next_values`` (H, B) already reduced over critics; bootstrapping after a
    done step is scaled by ``boot``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    H = rewards.shape[0]
    R = rewards + alpha * np.asarray(entropy_norm)
    out = np.zeros_like(R)
    nv = np.asarray(next_values)
    nxt = None
    for t in range(H - 1, -1, -1):
        last = np.asarray(dones[t], dtype=bool) | (t == H - 1)
        one_step = R[t] + gamma * nv[t] * np.where(dones[t], boot[t], 1.0)
        if nxt is None:
            out[t] = one_step
        else:
            out[t] = np.where(last, one_step,
                              R[t] + gamma * ((1.0 - lam) * nv[t] + lam * nxt))
        nxt = out[t]
    return out


def buffer_targets(buf: RolloutBuffer, critics, critic_params, alpha, cfg: AlgoConfig):
    """Targets for a detached buffer, with next-state values recomputed by the current critics."""
    if not buf.detached:
        raise ValueError("targets need a detached buffer")
    vals = [critics(critic_params, o) for o in buf.next_obs]
    nv = np.stack([T.value(_reduce(v, cfg.target_value)) for v in vals])
    a = alpha if cfg.entropy_in_targets else 0.0
    return soft_td_lambda_targets(np.stack(buf.rewards), np.stack(buf.entropy_norm), nv,
                                  np.stack(buf.dones), np.stack(buf.boot), a, cfg.gamma, cfg.lam)


def _cat_obs(obs_list, idx=None):
    sv = np.concatenate([T.value(o.state_vec) for o in obs_list])
    pc = None
    if obs_list[0].point_cloud is not None:
        pc = np.concatenate([T.value(o.point_cloud) for o in obs_list])
    o = Observation(sv, pc)
    return o if idx is None else o.take(idx)


def critic_loss(critics, params, obs, targets):
    """Sum over ensemble members of each member's mean squared error."""
    loss = 0.0
    for v in critics(params, obs):
        err = v - targets
        loss = loss + T.mean(err * err)
    return loss


def critic_update(critics, critic_params: dict, buf: RolloutBuffer, targets, K: int, minibatches: int,
                  optimizer: nets.AdamW, rng: np.random.Generator, lr=None) -> float:
    """K shuffled passes over the buffer; returns the mean loss of the last pass."""
    obs = _cat_obs(buf.obs)
    y = np.asarray(targets).reshape(-1)
    n = len(y)
    last = float("nan")
    for _ in range(K):
        perm = rng.permutation(n)
        losses = []
        for chunk in np.array_split(perm, max(1, min(minibatches, n))):
            g = T.TapeGraph()
            leaves = {k: g.leaf(v) for k, v in critic_params.items()}
            loss = critic_loss(critics, leaves, obs.take(chunk), y[chunk])
            if not np.isfinite(T.value(loss)):
                raise FloatingPointError("critic loss is not finite")
            grads = g.backward(loss)
            optimizer.step(critic_params, {k: grads[leaf] for k, leaf in leaves.items()}, lr=lr)
            losses.append(float(T.value(loss)))
        last = float(np.mean(losses))
    return last


# ---------------------------------------------------------------------------
# estimators

def _tile(params, n):
    return {k: np.broadcast_to(v, (n,) + v.shape).copy() for k, v in params.items()}


def _tiled_init(task: Task, init_state, n):
    return {k: np.broadcast_to(v, (n,) + np.shape(v)).copy() for k, v in init_state.items()}


def _rollout_return(task, policy, params, state, noise, gamma, taped_dynamics=True):
    R = 0.0
    logps = 0.0
    for t in range(noise.shape[0]):
        obs = task.observe(state)
        if not taped_dynamics:
            obs = obs.detach()
        a, logp = policy.sample(params, obs, noise[t])
        a_env = a if taped_dynamics else T.value(a)
        nxt = task.dynamics(state, T.clamp(a_env, -1.0, 1.0))
        R = R + (gamma ** t) * task.reward(state, a_env, nxt)
        if not taped_dynamics:
            logps = logps + policy.log_prob(params, obs, T.value(a))
            nxt = {k: T.value(v) for k, v in nxt.items()}
        state = nxt
    return R, logps


@dataclass
class Estimate:
    mean: dict
    stderr: dict
    n: int


def _accumulate(stats, grads, leaves):
    for k, leaf in leaves.items():
        g = grads[leaf].reshape(grads[leaf].shape[0], -1)
        s, s2 = stats.setdefault(k, [0.0, 0.0])
        stats[k] = [s + g.sum(0), s2 + (g * g).sum(0)]


def _finish(stats, params, n):
    mean, se = {}, {}
    for k, (s, s2) in stats.items():
        m = s / n
        var = np.maximum(s2 / n - m * m, 0.0) * n / max(n - 1, 1)
        mean[k] = m.reshape(params[k].shape)
        se[k] = np.sqrt(var / n).reshape(params[k].shape)
    return Estimate(mean, se, n)


def fobg_estimate(task: Task, policy, params, N, H, rng, init_state=None, gamma=1.0, chunk=10000):
    """First-order batched gradient: mean over samples of d R / d theta through the dynamics."""
    init_state = init_state if init_state is not None else task.initial_state(rng)
    stats = {}
    done = 0
    while done < N:
        n = min(chunk, N - done)
        g = T.TapeGraph()
        leaves = {k: g.leaf(v) for k, v in _tile(params, n).items()}
        noise = rng.standard_normal((H, n, task.act_dim))
        R, _ = _rollout_return(task, policy, leaves, _tiled_init(task, init_state, n), noise, gamma)
        grads = g.backward(T.sum(R))
        _accumulate(stats, grads, leaves)
        done += n
    return _finish(stats, params, N)


def zobg_estimate(task: Task, policy, params, N, H, rng, init_state=None, gamma=1.0, chunk=10000):
    """Zeroth-order batched gradient: mean of R * sum_t grad log pi(a_t|s_t), no simulator gradients."""
    init_state = init_state if init_state is not None else task.initial_state(rng)
    stats = {}
    done = 0
    while done < N:
        n = min(chunk, N - done)
        g = T.TapeGraph()
        leaves = {k: g.leaf(v) for k, v in _tile(params, n).items()}
        noise = rng.standard_normal((H, n, task.act_dim))
        R, logps = _rollout_return(task, policy, leaves, _tiled_init(task, init_state, n), noise, gamma,
                                   taped_dynamics=False)
        grads = g.backward(T.sum(T.value(R) * logps))
        _accumulate(stats, grads, leaves)
        done += n
    return _finish(stats, params, N)


# ---------------------------------------------------------------------------
# open-loop trajectory optimization

@dataclass
class TrajOptResult:
    actions: np.ndarray  # (T, act_dim)
    epoch_returns: list


def trajopt_optimize(task: Task, num_envs: int, epochs: int = 50, horizon: int = 32, lr: float = 0.01,
                     betas=(0.7, 0.95), grad_clip=0.5, seed: int = 0, weight_decay=0.0) -> TrajOptResult:
    """Gradient ascent on the mean total reward of one action sequence shared by all envs.

    Each epoch replays the episode from the same initial states and takes one
    optimizer step per window of ``horizon`` steps.
    """
    Tn = task.episode_length
    seq = np.zeros((Tn, task.act_dim))
    opt = nets.AdamW(lr, betas, weight_decay=weight_decay, grad_clip=grad_clip)
    returns = []
    env = EnvBatch(task, num_envs, seed)
    for _ in range(epochs):
        env.reset(seed)
        total = 0.0
        for start in range(0, Tn, horizon):
            stop = min(start + horizon, Tn)
            g = T.TapeGraph()
            w = g.leaf(seq[start:stop])
            R = 0.0
            for t in range(stop - start):
                a = T.broadcast_to(w[t], (num_envs, task.act_dim))
                R = R + env.step(a).reward
            J = T.mean(R)
            total += float(T.value(J))
            grads = g.backward(J)
            p = {"a": seq[start:stop]}
            opt.step(p, {"a": -grads[w]})
            seq[start:stop] = p["a"]
            env.detach()
        returns.append(total)
    return TrajOptResult(seq, returns)


def evaluate_sequence(task: Task, actions, episodes: int, seed: int) -> np.ndarray:
    env = EnvBatch(task, episodes, seed)
    R = np.zeros(episodes)
    for t in range(task.episode_length):
        R += T.value(env.step(np.broadcast_to(actions[t], (episodes, task.act_dim))).reward)
    return R


# ---------------------------------------------------------------------------
# evaluation

def evaluate_policy(task: Task, policy, params, episodes: int, seed: int, deterministic=True) -> np.ndarray:
    """Undiscounted returns of ``episodes`` parallel episodes from a fixed seed."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = EnvBatch(task, episodes, seed)
    rng = np.random.default_rng(seed)
    R = np.zeros(episodes)
    obs = env.observe()
    for _ in range(task.episode_length):
        if deterministic:
            a = policy.mean_action(params, obs)
        else:
            a, _ = policy.sample(params, obs, rng.standard_normal((episodes, task.act_dim)))
        res = env.step(T.value(a))
        R += T.value(res.reward)
        obs = res.obs
    return R


def mean_ci(x, z=1.96):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(z * x.std(ddof=1) / math.sqrt(len(x)))


# ---------------------------------------------------------------------------
# training loop

METRIC_FIELDS = ("iteration", "env_steps", "return_mean", "return_std", "entropy_mean", "alpha",
                 "actor_loss", "critic_loss", "seconds")


class Trainer:
    """One SAPO / SHAC / APG run on a batched task."""

    def __init__(self, task: Task, cfg: AlgoConfig, seed: int = 0):
        self.task = task
        self.cfg = cfg
        self.seed = seed
        self.frame_time = task.frame_time
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.env = EnvBatch(task, cfg.num_envs, seed)
        use_cloud = cfg.use_point_cloud and task.cloud_size > 0
        self.policy = nets.SquashedGaussianPolicy(
            task.obs_dim, task.act_dim, tuple(cfg.actor_hidden), cfg.activation,
            cfg.state_dependent_sigma, tuple(cfg.log_std_bounds), cfg.init_log_std, use_cloud)
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.actor_params = self.policy.init(init_rng)
        self.critics = None
        self.critic_params = {}
        if cfg.algo != "apg":
            self.critics = nets.CriticEnsemble(task.obs_dim, cfg.num_critics, tuple(cfg.critic_hidden),
                                               cfg.activation, use_cloud)
            self.critic_params = self.critics.init(init_rng)
        self.target_params = None
        if self.critics is not None and cfg.critic_tau is not None:
            self.target_params = clone_params(self.critic_params)
        self.actor_opt = nets.AdamW(cfg.actor_lr, tuple(cfg.betas), weight_decay=cfg.weight_decay,
                                    grad_clip=cfg.actor_grad_clip)
        self.critic_opt = nets.AdamW(cfg.critic_lr, tuple(cfg.betas), weight_decay=cfg.weight_decay,
                                     grad_clip=cfg.critic_grad_clip)
        target = cfg.target_entropy if cfg.target_entropy is not None else -task.act_dim / 2.0
        self.temperature = make_temperature(cfg.init_temperature, target, cfg.entropy_lr, tuple(cfg.betas))
        self.iteration = 0
        self.env_steps = 0
        self.cursor = 0

    @property
    def alpha(self):
        return self.temperature.alpha if np.isfinite(self.temperature.log_alpha) else 0.0

    def _lr_scale(self):
        if self.cfg.lr_schedule == "constant":
            return 1.0
        return max(0.0, 1.0 - self.iteration / max(1, self.cfg.iterations))

    def actor_loss(self, buf):
        cfg = self.cfg
        if cfg.algo == "apg":
            return actor_objective_apg(buf, cfg.gamma)
        if cfg.algo == "shac":
            return actor_objective_shac(buf, cfg.gamma)
        a = self.alpha if cfg.entropy_in_actor else 0.0
        return actor_objective_sapo(buf, a, cfg.gamma, cfg.actor_value)

    def train_iteration(self) -> dict:
        cfg = self.cfg
        scale = self._lr_scale()
        alpha = self.alpha
        g = T.TapeGraph()
        leaves = {k: g.leaf(v) for k, v in self.actor_params.items()}
        value_params = self.target_params if self.target_params is not None else self.critic_params
        buf = collect_rollout(self.env, self.policy, leaves, self.critics, value_params, alpha, cfg,
                              self.rng, self.temperature.target_entropy, self.cursor)
        self.cursor = buf.cursor
        loss = self.actor_loss(buf)
        grads = g.backward(loss)
        self.actor_opt.step(self.actor_params, {k: grads[leaf] for k, leaf in leaves.items()},
                            lr=cfg.actor_lr * scale)
        actor_loss = float(T.value(loss))
        self.env.detach()
        buf = buf.detach()
        del g, leaves
        h = np.stack(buf.entropy)
        if cfg.algo == "sapo" and cfg.learn_temperature:
            temperature_update(self.temperature, h, lr=cfg.entropy_lr * scale)
        critic_loss_v = float("nan")
        if self.critics is not None and cfg.critic_updates > 0:
            targets = buffer_targets(buf, self.critics, value_params, alpha, cfg)
            critic_loss_v = critic_update(self.critics, self.critic_params, buf, targets, cfg.critic_updates,
                                          cfg.critic_minibatches, self.critic_opt, self.rng,
                                          lr=cfg.critic_lr * scale)
            if self.target_params is not None:
                polyak_update(self.target_params, self.critic_params, cfg.critic_tau)
        self.iteration += 1
        self.env_steps += cfg.horizon * cfg.num_envs
        window = cfg.return_window or cfg.num_envs
        recent = self.env.completed_returns[-window:]
        return {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "return_mean": float(np.mean(recent)) if recent else float("nan"),
            "return_std": float(np.std(recent)) if recent else float("nan"),
            "entropy_mean": float(np.mean(h)),
            "alpha": self.alpha,
            "actor_loss": actor_loss,
            "critic_loss": critic_loss_v,
            # simulated seconds, so the metrics file stays reproducible byte for byte
            "seconds": self.env_steps / cfg.num_envs * self.frame_time,
        }

    # -- checkpointing ---------------------------------------------------------

    def state(self) -> tuple[dict, dict]:
        arrays = {}
        arrays.update({f"params/{k}": v for k, v in self.actor_params.items()})
        arrays.update({f"params/{k}": v for k, v in self.critic_params.items()})
        if self.target_params is not None:
            arrays.update({f"target/{k}": v for k, v in self.target_params.items()})
        arrays.update(self.actor_opt.state_arrays("opt_actor/"))
        arrays.update(self.critic_opt.state_arrays("opt_critic/"))
        arrays.update(self.temperature.optimizer.state_arrays("opt_alpha/"))
        env = self.env.state_dict()
        int_keys = []
        for k, v in env["state"].items():
            arrays[f"env/{k}"] = np.asarray(v, dtype=np.float64)
            if not np.issubdtype(np.asarray(v).dtype, np.floating):
                int_keys.append(k)
        arrays["env/_t"] = env["t"].astype(np.float64)
        arrays["env/_episode_return"] = env["episode_return"]
        meta = {
            "iteration": self.iteration, "env_steps": self.env_steps, "cursor": self.cursor,
            "seed": self.seed, "task": self.task.name, "algo": self.cfg.algo,
            "log_alpha": self.temperature.log_alpha if np.isfinite(self.temperature.log_alpha) else None,
            "opt_actor": self.actor_opt.state_meta(), "opt_critic": self.critic_opt.state_meta(),
            "opt_alpha": self.temperature.optimizer.state_meta(),
            "rng": self.rng.bit_generator.state, "env_rng": env["rng"], "env_seed": env["seed"],
            "env_int_keys": int_keys, "completed_returns": env["completed_returns"],
        }
        return arrays, meta

    def save(self, path):
        arrays, meta = self.state()
        nets.save_checkpoint(path, arrays, meta)

    def load(self, path, weights_only=False):
        arrays, meta = nets.load_checkpoint(path)
        load_params(self, arrays)
        if weights_only:
            return meta
        self.iteration = int(meta["iteration"])
        self.env_steps = int(meta["env_steps"])
        self.cursor = int(meta["cursor"])
        la = meta["log_alpha"]
        self.temperature.log_alpha = -math.inf if la is None else float(la)
        self.actor_opt.load(arrays, "opt_actor/", meta["opt_actor"])
        self.critic_opt.load(arrays, "opt_critic/", meta["opt_critic"])
        self.temperature.optimizer.load(arrays, "opt_alpha/", meta["opt_alpha"])
        self.rng.bit_generator.state = meta["rng"]
        if self.target_params is not None:
            self.target_params = {k: arrays[f"target/{k}"].copy() for k in self.critic_params}
        state = {}
        for k, v in arrays.items():
            if k.startswith("env/") and not k.startswith("env/_"):
                name = k[4:]
                state[name] = v.astype(np.int64) if name in meta["env_int_keys"] else v
        self.env.load_state_dict({
            "seed": meta["env_seed"], "state": state, "t": arrays["env/_t"],
            "episode_return": arrays["env/_episode_return"],
            "completed_returns": meta["completed_returns"], "rng": meta["env_rng"],
        })
        return meta


def load_params(trainer: Trainer, arrays: dict):
    """Copy saved network weights into a trainer, rejecting shape mismatches."""
    saved = {k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")}
    expected = dict(trainer.actor_params)
    expected.update(trainer.critic_params)
    nets.check_compatible(expected, saved)
    for k in trainer.actor_params:
        trainer.actor_params[k] = saved[k].copy()
    for k in trainer.critic_params:
        trainer.critic_params[k] = saved[k].copy()


def polyak_update(target: dict, source: dict, tau: float):
    for k, v in source.items():
        target[k] *= tau
        target[k] += (1.0 - tau) * v


def clone_params(params):
    return copy.deepcopy(params)


def stack_initial_states(task, rngs):
    return stack_states([task.initial_state(r) for r in rngs])
