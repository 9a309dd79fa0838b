"""DQN over the 11-bin dose grid with zero-dose-biased exploration.

The exploration prior puts probability p0 = n(n+1)/(2n^2 - n + 1) on the
zero-dose bin and spreads the rest uniformly, which keeps the ratio
p0/p_other = n(n+1)/(n-1). The buffer is warm-started with a conservative
scripted policy over bins {0, 1, 2} before any gradient step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, nets
from .env import ACTION_HIGH, GlucoseEnv, Observation

N_ACTIONS = 11

# Fixed feature scaling applied to the raw 48-vector before the Q-network:
# glucose, rate and dose live on very different ranges.
_OBS_SCALE = np.tile(np.array([200.0, 9.0, 2.25]), 16)


@dataclass
class DqnConfig:
    n_actions: int = N_ACTIONS
    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 128
    target_sync_every: int = 100
    eps_start: float = 0.9
    eps_final: float = 0.1
    eps_test: float = 0.001
    use_prior: bool = False
    warm_start_steps: int = 480
    replay_capacity: int = 50_000
    hidden_sizes: tuple[int, ...] = (64, 64)
    epochs: int = 20
    steps_per_epoch: int = 480


@dataclass(frozen=True)
class ExplorationDistribution:
    p0: float
    p_other: float
    n_actions: int

    def probs(self) -> np.ndarray:
        p = np.full(self.n_actions, self.p_other)
        p[0] = self.p0
        return p


def zero_biased_probs(n_actions: int) -> ExplorationDistribution:
    """Closed-form zero-dose prior over an n-bin dose grid."""
    if n_actions < 2:
        raise ValueError("n_actions must be at least 2")
    n = n_actions
    p0 = n * (n + 1) / (2 * n * n - n + 1)
    return ExplorationDistribution(p0=p0, p_other=(1.0 - p0) / (n - 1),
                                   n_actions=n)


def uniform_probs(n_actions: int) -> ExplorationDistribution:
    if n_actions < 2:
        raise ValueError("n_actions must be at least 2")
    return ExplorationDistribution(p0=1.0 / n_actions, p_other=1.0 / n_actions,
                                   n_actions=n_actions)


def bin_to_rate(bin_index: int) -> float:
    """Linear 11-bin grid over [0, 9] U/h: bin * 0.9."""
    if not (0 <= bin_index < N_ACTIONS):
        raise ValueError(f"bin must lie in [0, {N_ACTIONS - 1}]")
    return 0.9 * bin_index


def featurize(flat_obs: np.ndarray) -> np.ndarray:
    return np.asarray(flat_obs, dtype=np.float64) / _OBS_SCALE


class ReplayBuffer:
    """Ring buffer of (obs, action bin, reward, next obs, terminated)."""

    def __init__(self, capacity: int, obs_dim: int = 48):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def add(self, obs, action, reward, next_obs, terminated):
        i = self._pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.terminated[i] = terminated
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self.size:
            raise ValueError("not enough transitions to sample a batch")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.terminated[idx])


def select_action(qnet: nets.DenseNet, obs_flat, eps: float,
                  dist: ExplorationDistribution,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy with the configured exploration distribution.

    Greedy ties break toward the lowest bin (safest dose).
    """
    if not (0 <= eps <= 1):
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0 and rng.random() < eps:
        return int(rng.choice(dist.n_actions, p=dist.probs()))
    q, _ = nets.forward(qnet, featurize(obs_flat))
    return int(np.argmax(q))


def eps_schedule(step: int, total_steps: int, config: DqnConfig) -> float:
    """Linear decay from eps_start to eps_final over the training horizon."""
    if total_steps <= 1:
        return config.eps_final
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return config.eps_start + frac * (config.eps_final - config.eps_start)


def warm_start_fill(buffer: ReplayBuffer, env: GlucoseEnv, steps: int,
                    rng: np.random.Generator, episode_seeds=None) -> ReplayBuffer:
    """Fill the buffer with a uniform policy over bins {0, 1, 2}."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return buffer
    seed_iter = iter(episode_seeds) if episode_seeds is not None else None
    obs = env.reset(next(seed_iter) if seed_iter else int(rng.integers(2**31)))
    for _ in range(steps):
        a = int(rng.integers(0, 3))
        res = env.step(bin_to_rate(a))
        buffer.add(obs.flat, a, res.reward, res.observation.flat, res.terminated)
        obs = res.observation
        if res.terminated or res.truncated:
            obs = env.reset(next(seed_iter) if seed_iter else int(rng.integers(2**31)))
    return buffer


def train_step(qnet: nets.DenseNet, target_net: nets.DenseNet, batch,
               opt: nets.OptimizerState, config: DqnConfig) -> float:
    """One Adam step on the mean-squared TD error; returns the loss."""
    obs, actions, rewards, next_obs, terminated = batch
    n = len(actions)
    if n == 0:
        raise ValueError("empty batch")
    feats = featurize(obs)
    next_feats = featurize(next_obs)
    q_next, _ = nets.forward(target_net, next_feats)
    targets = rewards + config.gamma * q_next.max(axis=1) * (~terminated)
    q, cache = nets.forward(qnet, feats)
    taken = q[np.arange(n), actions]
    td = taken - targets
    loss = float(np.mean(td ** 2))
    grad_out = np.zeros_like(q)
    grad_out[np.arange(n), actions] = 2.0 * td / n
    grads = nets.backward(qnet, cache, grad_out)
    nets.adam_step(qnet, grads, opt)
    return loss


@dataclass
class EpochLog:
    epoch: int
    train_return: float          # mean normalised return of episodes this epoch
    episodes: int
    hypo_terminations: int
    hyper_terminations: int
    mean_loss: float


@dataclass
class TrainResult:
    checkpoints: list            # list of (epoch, DenseNet copy)
    log: list                    # list of EpochLog
    config: DqnConfig


def _cycle_envs(env_group: str, env_factory):
    """Environment schedule: per-cohort groups use the 4 patients round robin;
    'mixed' cycles all 12 patients."""
    from .patients import Cohort
    if env_group == "mixed":
        specs = [(c, pid) for c in Cohort for pid in range(4)]
    else:
        specs = [(Cohort(env_group), pid) for pid in range(4)]
    return [env_factory(c, pid) for c, pid in specs]


def train_dqn(env_group: str, config: DqnConfig, seed: int,
              env_factory=None) -> TrainResult:
    """Train over config.epochs x config.steps_per_epoch env steps.

    One gradient update per environment step once the warm-started buffer can
    fill a batch; one checkpoint per epoch; the log carries per-epoch
    normalised training return and termination causes.
    """
    from .env import default_scenario

    if env_factory is None:
        def env_factory(cohort, pid):
            return GlucoseEnv(default_scenario(cohort, pid))

    root = np.random.SeedSequence([seed, 0xD09])
    net_ss, warm_ss, act_ss, sample_ss, ep_ss = root.spawn(5)
    rng_act = np.random.default_rng(act_ss)
    rng_sample = np.random.default_rng(sample_ss)
    rng_episode = np.random.default_rng(ep_ss)

    sizes = [48, *config.hidden_sizes, config.n_actions]
    qnet = nets.init_standard(sizes, seed=int(net_ss.generate_state(1)[0]))
    target = qnet.copy()
    opt = nets.make_optimizer(qnet, learning_rate=config.lr)

    envs = _cycle_envs(env_group, env_factory)
    env_idx = 0

    buffer = ReplayBuffer(config.replay_capacity)
    warm_rng = np.random.default_rng(warm_ss)
    warm_start_fill(buffer, envs[0], config.warm_start_steps, warm_rng)

    dist = zero_biased_probs(config.n_actions) if config.use_prior \
        else uniform_probs(config.n_actions)
    total_steps = config.epochs * config.steps_per_epoch
    grad_steps = 0
    global_step = 0

    checkpoints, log = [], []
    env = envs[env_idx]
    obs = env.reset(int(rng_episode.integers(2**31)))
    ep_return = 0.0

    for epoch in range(config.epochs):
        ep_returns, losses = [], []
        hypo = hyper = 0
        for _ in range(config.steps_per_epoch):
            eps = eps_schedule(global_step, total_steps, config)
            a = select_action(qnet, obs.flat, eps, dist, rng_act)
            res = env.step(bin_to_rate(a))
            buffer.add(obs.flat, a, res.reward, res.observation.flat,
                       res.terminated)
            ep_return += res.reward
            obs = res.observation
            global_step += 1

            if res.terminated or res.truncated:
                ep_returns.append(metrics.normalized_return(ep_return))
                if env.termination_cause == "hypo":
                    hypo += 1
                elif env.termination_cause == "hyper":
                    hyper += 1
                ep_return = 0.0
                env_idx = (env_idx + 1) % len(envs)
                env = envs[env_idx]
                obs = env.reset(int(rng_episode.integers(2**31)))

            if buffer.size >= config.batch_size:
                batch = buffer.sample(config.batch_size, rng_sample)
                losses.append(train_step(qnet, target, batch, opt, config))
                grad_steps += 1
                if grad_steps % config.target_sync_every == 0:
                    target.copy_from(qnet)

        checkpoints.append((epoch, qnet.copy()))
        log.append(EpochLog(
            epoch=epoch,
            train_return=float(np.mean(ep_returns)) if ep_returns else float("nan"),
            episodes=len(ep_returns),
            hypo_terminations=hypo,
            hyper_terminations=hyper,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
        ))
    return TrainResult(checkpoints=checkpoints, log=log, config=config)
