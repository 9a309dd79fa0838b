"""PPO with clipped surrogate, GAE, and two action transforms.

The tanh transform squashes an unbounded Gaussian logit into (0, d_max) with
the exact change-of-variables log-density; the hard clip transform keeps the
naive unsquashed Gaussian density on purpose, reproducing the common
(theoretically inconsistent) baseline. Gradients are computed by hand and
pushed through the dense-net backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, nets
from .env import GlucoseEnv

D_MAX = 9.0
_LOG_2PI = math.log(2.0 * math.pi)
_LOG_SIGMA_MIN, _LOG_SIGMA_MAX = -5.0, 2.0


class PpoUpdateError(RuntimeError):
    """Non-finite loss encountered during an update."""


@dataclass
class PpoConfig:
    steps_per_collect: int = 192
    repeat_per_collect: int = 20
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    value_coef: float = 0.5
    entropy_coef: float = 0.001
    conditioned_sigma: bool = False
    value_clip: bool = False
    advantage_normalization: bool = True
    lr: float = 1e-3
    batch_size: int = 128
    transform: str = "tanh"          # "tanh" (prior) or "clip" (no prior)
    d_max: float = D_MAX
    hidden_sizes: tuple[int, ...] = (64, 64)
    init_scale: float = 1e-3
    sigma_init: float = 0.5
    mu_offset: float | None = None   # None -> auto per transform
    warm_start_steps: int = 192
    epochs: int = 20
    steps_per_epoch: int = 480


def squash_tanh(z: float, d_max: float = D_MAX) -> float:
    """Map an unbounded logit into the open dose interval (0, d_max)."""
    return d_max / 2.0 * (math.tanh(z) + 1.0)


def unsquash_tanh(a: float, d_max: float = D_MAX) -> float:
    if not (0 < a < d_max):
        raise ValueError(f"action must lie in (0, {d_max}), got {a!r}")
    return math.atanh(2.0 * a / d_max - 1.0)


def act_clip(z: float, d_max: float = D_MAX) -> float:
    """Hard-clip transform: saturates at the dose bounds."""
    return d_max / 2.0 * (min(max(z, -1.0), 1.0) + 1.0)


def _log_sech2(z):
    """log(1 - tanh(z)^2), stable for large |z|."""
    z = np.abs(z)
    return 2.0 * (math.log(2.0) - z - np.log1p(np.exp(-2.0 * z)))


def _gauss_logpdf(z, mu, sigma):
    return -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * _LOG_2PI


def log_prob_tanh(a: float, mu: float, sigma: float,
                  d_max: float = D_MAX) -> float:
    """Exact log-density of the squashed-Gaussian action."""
    z = unsquash_tanh(a, d_max)
    return float(log_prob_tanh_z(z, mu, sigma, d_max))


def log_prob_tanh_z(z, mu, sigma, d_max: float = D_MAX):
    """Same density expressed in logit space (numerically stable)."""
    return _gauss_logpdf(z, mu, sigma) - (math.log(d_max / 2.0) + _log_sech2(z))


def log_prob_tanh_grad(a: float, mu: float, sigma: float,
                       d_max: float = D_MAX) -> tuple[float, float]:
    """(d/dmu, d/dsigma) of log_prob_tanh; the Jacobian term has no theta."""
    z = unsquash_tanh(a, d_max)
    d_mu = (z - mu) / sigma ** 2
    d_sigma = (z - mu) ** 2 / sigma ** 3 - 1.0 / sigma
    return d_mu, d_sigma


def log_prob_clip(z, mu, sigma):
    """Naive Gaussian density of the raw logit (clip baseline, on purpose)."""
    return _gauss_logpdf(z, mu, sigma)


def gae(rewards, values, next_values, terminals, gamma: float, lam: float):
    """Recursive GAE; returns (advantages, returns-to-go).

    `next_values[t]` is the critic's bootstrap at s_{t+1} (already 0 for
    terminated steps is not required: terminals masks it). Episode ends
    (terminated or truncated) must be marked in `terminals` so the advantage
    recursion does not leak across boundaries; truncated tails bootstrap via
    next_values.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    terminals = np.asarray(terminals, dtype=bool)
    if not (len(rewards) == len(values) == len(next_values) == len(terminals)):
        raise ValueError("gae inputs must have equal lengths")
    t_len = len(rewards)
    adv = np.zeros(t_len)
    running = 0.0
    for t in reversed(range(t_len)):
        not_term = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * next_values[t] * not_term - values[t]
        running = delta + gamma * lam * not_term * running
        adv[t] = running
    return adv, adv + values


@dataclass
class PpoPolicy:
    actor: nets.DenseNet
    log_sigma: np.ndarray            # scalar parameter when not conditioned
    transform: str
    d_max: float
    conditioned_sigma: bool
    mu_offset: float

    def heads(self, feats):
        """(mu, log_sigma) per row plus the actor forward cache."""
        out, cache = nets.forward(self.actor, feats)
        out = np.atleast_2d(out)
        mu = out[:, 0] + self.mu_offset
        if self.conditioned_sigma:
            log_sigma = np.clip(out[:, 1], _LOG_SIGMA_MIN, _LOG_SIGMA_MAX)
        else:
            log_sigma = np.full(len(mu), float(np.clip(
                self.log_sigma, _LOG_SIGMA_MIN, _LOG_SIGMA_MAX)))
        return mu, log_sigma, cache

    def to_action(self, z: float) -> float:
        if self.transform == "tanh":
            return squash_tanh(z, self.d_max)
        return act_clip(z, self.d_max)

    def log_prob_z(self, z, mu, sigma):
        if self.transform == "tanh":
            return log_prob_tanh_z(z, mu, sigma, self.d_max)
        return log_prob_clip(z, mu, sigma)

    def sample(self, feats, rng: np.random.Generator):
        mu, log_sigma, _ = self.heads(feats)
        sigma = np.exp(log_sigma)
        z = float(mu[0] + sigma[0] * rng.standard_normal())
        logp = float(self.log_prob_z(z, mu[0], sigma[0]))
        return z, self.to_action(z), logp

    def mean_action(self, feats) -> float:
        mu, _, _ = self.heads(feats)
        return self.to_action(float(mu[0]))


def default_mu_offset(transform: str, d_max: float = D_MAX) -> float:
    """Logit offset making the fresh tanh actor start near 0.5 U/h.

    The literal near-zero init maps to d_max/2 under tanh; the offset keeps
    initial doses conservative instead. Clip keeps the literal architecture.
    """
    if transform == "tanh":
        return math.atanh(2.0 * 0.5 / d_max - 1.0)
    return 0.0


def make_policy(config: PpoConfig, seed: int) -> PpoPolicy:
    out_dim = 2 if config.conditioned_sigma else 1
    actor = nets.init_near_zero([48, *config.hidden_sizes, out_dim],
                                scale=config.init_scale, seed=seed)
    offset = config.mu_offset if config.mu_offset is not None \
        else default_mu_offset(config.transform, config.d_max)
    return PpoPolicy(actor=actor,
                     log_sigma=np.array(math.log(config.sigma_init)),
                     transform=config.transform, d_max=config.d_max,
                     conditioned_sigma=config.conditioned_sigma,
                     mu_offset=offset)


class RolloutBuffer:
    """Chronological on-policy transitions for one or more collects."""

    def __init__(self):
        self.obs, self.z, self.actions = [], [], []
        self.log_probs, self.rewards = [], []
        self.values, self.next_values = [], []
        self.terminals = []

    def __len__(self):
        return len(self.obs)

    def add(self, obs, z, action, log_prob, reward, value, next_value,
            terminal):
        self.obs.append(np.asarray(obs, dtype=float))
        self.z.append(z)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.next_values.append(next_value)
        self.terminals.append(terminal)

    def arrays(self):
        return (np.stack(self.obs), np.asarray(self.z), np.asarray(self.actions),
                np.asarray(self.log_probs), np.asarray(self.rewards),
                np.asarray(self.values), np.asarray(self.next_values),
                np.asarray(self.terminals, dtype=bool))

    def clear(self):
        self.__init__()


def _featurize(flat):
    from .dqn import featurize
    return featurize(flat)


def warm_start_ppo(buffer: RolloutBuffer, env: GlucoseEnv, steps: int,
                   rng: np.random.Generator, transform: str = "tanh",
                   d_max: float = D_MAX) -> RolloutBuffer:
    """Fill a rollout with uniform actions on [0, 2] U/h.

    Behaviour log-prob is the uniform density log(1/2); logits are recovered
    through the inverse transform so later updates can evaluate the new
    policy on them.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return buffer
    obs = env.reset(int(rng.integers(2**31)))
    behaviour_logp = math.log(1.0 / 2.0)
    for _ in range(steps):
        a = float(rng.uniform(0.0, 2.0))
        if transform == "tanh":
            z = math.atanh(np.clip(2.0 * a / d_max - 1.0, -1 + 1e-9, 1 - 1e-9))
        else:
            z = 2.0 * a / d_max - 1.0
        res = env.step(a)
        buffer.add(obs.flat, z, a, behaviour_logp, res.reward, 0.0, 0.0,
                   res.terminated or res.truncated)
        obs = res.observation
        if res.terminated or res.truncated:
            obs = env.reset(int(rng.integers(2**31)))
    return buffer


def ppo_update(policy: PpoPolicy, value_net: nets.DenseNet,
               rollout: RolloutBuffer, config: PpoConfig,
               actor_opt: nets.OptimizerState, critic_opt: nets.OptimizerState,
               rng: np.random.Generator) -> dict:
    """Minibatch PPO update over `repeat_per_collect` passes.

    Returns mean losses. Raises PpoUpdateError on non-finite losses.
    """
    obs, z, _a, logp_old, rewards, values, next_values, terminals = \
        rollout.arrays()
    feats = _featurize(obs)
    adv, returns = gae(rewards, values, next_values, terminals,
                       config.gamma, config.gae_lambda)
    if config.advantage_normalization:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    n = len(obs)
    stats = {"actor_loss": [], "value_loss": [], "entropy": []}
    for _ in range(config.repeat_per_collect):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            f = feats[idx]
            mu, log_sigma, cache = policy.heads(f)
            sigma = np.exp(log_sigma)
            logp = policy.log_prob_z(z[idx], mu, sigma)
            ratio = np.exp(logp - logp_old[idx])
            a_batch = adv[idx]
            surr1 = ratio * a_batch
            surr2 = np.clip(ratio, 1 - config.clip_eps, 1 + config.clip_eps) \
                * a_batch
            entropy = log_sigma + 0.5 * (1.0 + _LOG_2PI)
            actor_loss = float(-np.minimum(surr1, surr2).mean()
                               - config.entropy_coef * entropy.mean())
            if not math.isfinite(actor_loss):
                raise PpoUpdateError(
                    f"non-finite actor loss (ratio range "
                    f"[{ratio.min():.3g}, {ratio.max():.3g}])")

            # Gradient flows through the unclipped branch only where it is
            # the active minimum; the clipped branch is flat in theta.
            active = surr1 <= surr2
            m = len(idx)
            d_logp = np.where(active, -a_batch * ratio, 0.0) / m
            d_mu = d_logp * (z[idx] - mu) / sigma ** 2
            d_log_sigma = d_logp * (((z[idx] - mu) / sigma) ** 2 - 1.0) \
                - config.entropy_coef / m
            grad_out = np.zeros((m, policy.actor.layer_sizes[-1]))
            grad_out[:, 0] = d_mu
            if policy.conditioned_sigma:
                raw = np.atleast_2d(cache[-1])[:, 1]
                in_band = (raw > _LOG_SIGMA_MIN) & (raw < _LOG_SIGMA_MAX)
                grad_out[:, 1] = np.where(in_band, d_log_sigma, 0.0)
            grads = nets.backward(policy.actor, cache, grad_out)
            nets.adam_step(policy.actor, grads, actor_opt)
            if not policy.conditioned_sigma:
                policy.log_sigma = np.clip(
                    policy.log_sigma - actor_opt.learning_rate
                    * float(d_log_sigma.sum()),
                    _LOG_SIGMA_MIN, _LOG_SIGMA_MAX)

            v_pred, v_cache = nets.forward(value_net, f)
            v_pred = v_pred[:, 0]
            err = v_pred - returns[idx]
            if config.value_clip:
                v_clipped = values[idx] + np.clip(
                    v_pred - values[idx], -config.clip_eps, config.clip_eps)
                err_clip = v_clipped - returns[idx]
                use_clip = err_clip ** 2 > err ** 2
                value_loss = float(np.maximum(err ** 2, err_clip ** 2).mean())
                inner = (v_pred - values[idx])
                clip_active = np.abs(inner) < config.clip_eps
                d_v = np.where(use_clip, 2 * err_clip * clip_active, 2 * err) / m
            else:
                value_loss = float((err ** 2).mean())
                d_v = 2 * err / m
            if not math.isfinite(value_loss):
                raise PpoUpdateError("non-finite value loss")
            v_grad_out = (config.value_coef * d_v)[:, None]
            v_grads = nets.backward(value_net, v_cache, v_grad_out)
            nets.adam_step(value_net, v_grads, critic_opt)

            stats["actor_loss"].append(actor_loss)
            stats["value_loss"].append(value_loss)
            stats["entropy"].append(float(entropy.mean()))
    return {k: float(np.mean(v)) for k, v in stats.items()}


@dataclass
class PpoEpochLog:
    epoch: int
    train_return: float
    episodes: int
    hypo_terminations: int
    hyper_terminations: int
    actor_loss: float
    value_loss: float


@dataclass
class PpoTrainResult:
    checkpoints: list            # (epoch, actor copy, log_sigma, value copy)
    log: list
    config: PpoConfig


def train_ppo(env_group: str, config: PpoConfig, seed: int,
              env_factory=None) -> PpoTrainResult:
    """Collect/update cycles with checkpoints at 480-env-step epochs."""
    from .dqn import _cycle_envs
    from .env import default_scenario

    if env_factory is None:
        def env_factory(cohort, pid):
            return GlucoseEnv(default_scenario(cohort, pid))

    root = np.random.SeedSequence([seed, 0xBB0])
    actor_ss, critic_ss, warm_ss, samp_ss, ep_ss, shuf_ss = root.spawn(6)
    policy = make_policy(config, seed=int(actor_ss.generate_state(1)[0]))
    value_net = nets.init_standard([48, *config.hidden_sizes, 1],
                                   seed=int(critic_ss.generate_state(1)[0]))
    actor_opt = nets.make_optimizer(policy.actor, learning_rate=config.lr)
    critic_opt = nets.make_optimizer(value_net, learning_rate=config.lr)
    rng_sample = np.random.default_rng(samp_ss)
    rng_episode = np.random.default_rng(ep_ss)
    rng_shuffle = np.random.default_rng(shuf_ss)

    envs = _cycle_envs(env_group, env_factory)
    env_idx = 0
    env = envs[env_idx]

    # Warm start: one off-policy update on conservative uniform-[0,2] doses.
    warm = RolloutBuffer()
    warm_start_ppo(warm, env, config.warm_start_steps,
                   np.random.default_rng(warm_ss), transform=config.transform,
                   d_max=config.d_max)
    if len(warm):
        ppo_update(policy, value_net, warm, config, actor_opt, critic_opt,
                   rng_shuffle)

    obs = env.reset(int(rng_episode.integers(2**31)))
    ep_return = 0.0
    total_steps = 0
    checkpoints, log = [], []
    epoch_returns, epoch_causes = [], []
    last_stats = {"actor_loss": float("nan"), "value_loss": float("nan")}
    next_epoch_at = config.steps_per_epoch
    epoch = 0

    while epoch < config.epochs:
        rollout = RolloutBuffer()
        while len(rollout) < config.steps_per_collect:
            f = _featurize(obs.flat)
            z, a, logp = policy.sample(f, rng_sample)
            v, _ = nets.forward(value_net, f)
            res = env.step(float(np.clip(a, 0.0, config.d_max)))
            nv = 0.0
            if not res.terminated:
                nv_out, _ = nets.forward(value_net, _featurize(res.observation.flat))
                nv = float(nv_out[0])
            rollout.add(obs.flat, z, a, logp, res.reward, float(v[0]), nv,
                        res.terminated or res.truncated)
            ep_return += res.reward
            obs = res.observation
            total_steps += 1
            if res.terminated or res.truncated:
                epoch_returns.append(metrics.normalized_return(ep_return))
                epoch_causes.append(env.termination_cause)
                ep_return = 0.0
                env_idx = (env_idx + 1) % len(envs)
                env = envs[env_idx]
                obs = env.reset(int(rng_episode.integers(2**31)))
        last_stats = ppo_update(policy, value_net, rollout, config,
                                actor_opt, critic_opt, rng_shuffle)

        while total_steps >= next_epoch_at and epoch < config.epochs:
            checkpoints.append((epoch, policy.actor.copy(),
                                float(policy.log_sigma), value_net.copy()))
            log.append(PpoEpochLog(
                epoch=epoch,
                train_return=float(np.mean(epoch_returns))
                if epoch_returns else float("nan"),
                episodes=len(epoch_returns),
                hypo_terminations=sum(1 for c in epoch_causes if c == "hypo"),
                hyper_terminations=sum(1 for c in epoch_causes if c == "hyper"),
                actor_loss=last_stats["actor_loss"],
                value_loss=last_stats["value_loss"],
            ))
            epoch_returns, epoch_causes = [], []
            epoch += 1
            next_epoch_at += config.steps_per_epoch
    return PpoTrainResult(checkpoints=checkpoints, log=log, config=config)
