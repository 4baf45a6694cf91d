"""Ensemble Q-learning with randomized subset targets and an entropy-regularized actor.

The learner keeps N critics trained toward a shared target: reward plus the
discounted minimum over a randomly drawn subset of M target critics, with the
usual entropy bonus. Many critic updates run per environment step; the actor
(and the automatic temperature) update once every K critic updates.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .buffers import Batch, ReplayBuffer, Termination, Transition
from .errors import ConfigError
from .nets import Adam, DenseNet, SquashedGaussianPolicy, save_checkpoint, load_checkpoint


@dataclass
class LearnerConfig:
    obs_dim: int
    goal_dim: int
    action_dim: int
    gamma: float = 0.99
    batch_size: int = 256
    lr: float = 1e-4
    updates_per_step: int = 20          # G: critic updates per env transition
    critic_to_actor_ratio: int = None   # K; defaults to G (one actor update per step)
    n_critics: int = 10
    subset_size: int = 2
    tau: float = 0.005
    warmup: int = 5000
    entropy_target: float = None        # defaults to -action_dim
    hidden: tuple = (256, 256)
    init_temperature: float = 0.1
    buffer_capacity: int = 1_000_000
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must be in (0,1), got {self.gamma}")
        if self.updates_per_step < 1:
            raise ConfigError("updates_per_step must be >= 1")
        if self.critic_to_actor_ratio is None:
            self.critic_to_actor_ratio = self.updates_per_step
        if self.critic_to_actor_ratio < 1:
            raise ConfigError("critic_to_actor_ratio must be >= 1")
        if not 1 <= self.subset_size <= self.n_critics:
            raise ConfigError(
                f"subset size {self.subset_size} outside [1, {self.n_critics}]")
        if self.entropy_target is None:
            self.entropy_target = -float(self.action_dim)


class CriticEnsemble:
    """N critics plus slow target copies sharing one Polyak coefficient."""

    def __init__(self, input_dim, n_critics, hidden, tau, subset_size, seed,
                 dtype=np.float64):
        widths = (input_dim,) + tuple(hidden) + (1,)
        self.online = DenseNet(widths, seed=seed, members=n_critics, dtype=dtype)
        self.target = self.online.clone()
        self.n = n_critics
        self.m = subset_size
        self.tau = float(tau)

    def polyak(self):
        for t, o in zip(self.target.params, self.online.params):
            t *= 1.0 - self.tau
            t += self.tau * o

    def subset_min_target_q(self, x, member_idx):
        q = self.target.forward_subset(x, member_idx)  # (M, B, 1)
        return q.min(axis=0)[:, 0]


def subset_min_target(reward, termination, q_min_next, logp_next, temperature,
                      gamma):
    """Bellman target: bootstrap on everything except failure terminations."""
    bootstrap = (termination != int(Termination.FAILURE)).astype(q_min_next.dtype)
    return reward + gamma * bootstrap * (q_min_next - temperature * logp_next)


class REDQLearner:
    """One skill's training state: actor, critic ensemble, temperature, buffer."""

    def __init__(self, cfg: LearnerConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        ss = np.random.SeedSequence(cfg.seed)
        s_actor, s_critic, s_buf, s_rng = ss.spawn(4)
        sg_dim = cfg.obs_dim + cfg.goal_dim
        self.actor = SquashedGaussianPolicy(
            sg_dim, cfg.action_dim, hidden=cfg.hidden,
            seed=s_actor.generate_state(1)[0], dtype=dtype)
        self.critics = CriticEnsemble(
            sg_dim + cfg.action_dim, cfg.n_critics, cfg.hidden, cfg.tau,
            cfg.subset_size, seed=s_critic.generate_state(1)[0], dtype=dtype)
        self.buffer = ReplayBuffer(cfg.obs_dim, cfg.goal_dim, cfg.action_dim,
                                   capacity=cfg.buffer_capacity,
                                   seed=s_buf.generate_state(1)[0])
        self.rng = np.random.default_rng(s_rng.generate_state(1)[0])
        self.log_alpha = np.array([math.log(cfg.init_temperature)], dtype=dtype)
        self.actor_adam = Adam(self.actor.net.params, lr=cfg.lr)
        self.critic_adam = Adam(self.critics.online.params, lr=cfg.lr)
        self.alpha_adam = Adam([self.log_alpha], lr=cfg.lr)
        self.env_steps = 0
        self.total_critic_updates = 0
        self.total_actor_updates = 0
        self.incidents = []

    @property
    def temperature(self):
        return float(np.exp(self.log_alpha[0]))

    # -- update rules ---------------------------------------------------

    def compute_target(self, batch: Batch):
        """Targets with a freshly drawn critic subset. Returns (y, subset)."""
        cfg = self.cfg
        next_sg = np.concatenate([batch.next_obs, batch.next_goal], axis=1)
        next_sg = next_sg.astype(self.dtype, copy=False)
        a_next, logp_next, _ = self.actor.sample(next_sg, self.rng)
        subset = self.draw_subset()
        x = np.concatenate([next_sg, a_next], axis=1)
        q_min = self.critics.subset_min_target_q(x, subset)
        y = subset_min_target(batch.reward.astype(self.dtype), batch.termination,
                              q_min, logp_next, self.temperature, cfg.gamma)
        return y, subset

    def draw_subset(self):
        return np.sort(self.rng.choice(self.critics.n, size=self.critics.m,
                                       replace=False))

    def critic_update(self, batch: Batch, targets):
        """Regress every critic to the shared targets, then Polyak the targets."""
        if not np.all(np.isfinite(targets)):
            self.incidents.append("non-finite critic target; update skipped")
            return None
        sg = np.concatenate([batch.obs, batch.goal], axis=1).astype(self.dtype)
        x = np.concatenate([sg, batch.action.astype(self.dtype)], axis=1)
        q = self.critics.online.forward(x, train=True)  # (N, B, 1)
        err = q - targets[None, :, None]
        loss = float(np.mean(err ** 2))
        grads, _ = self.critics.online.backward(2.0 * err / err.size)
        self.critic_adam.step(self.critics.online.params, grads)
        self.critics.polyak()
        self.total_critic_updates += 1
        return loss

    def actor_update(self, batch: Batch):
        """Ascend mean-over-ensemble Q minus temperature-weighted log-prob;
        then descend the temperature toward the entropy target."""
        cfg = self.cfg
        sg = np.concatenate([batch.obs, batch.goal], axis=1).astype(self.dtype)
        B = sg.shape[0]
        a, logp, cache = self.actor.sample(sg, self.rng, train=True)
        x = np.concatenate([sg, a], axis=1)
        q = self.critics.online.forward(x, train=True)  # (N, B, 1)
        alpha = self.temperature
        loss = float(np.mean(alpha * logp - q.mean(axis=0)[:, 0]))
        dq = np.full_like(q, -1.0 / (self.critics.n * B))
        _, dx = self.critics.online.backward(dq)
        d_action = dx.sum(axis=0)[:, -cfg.action_dim:]
        d_logp = np.full(B, alpha / B, dtype=self.dtype)
        grads, _ = self.actor.backward_objective(cache, d_action, d_logp)
        self.actor_adam.step(self.actor.net.params, grads)

        # temperature: L(alpha) = -alpha * mean(logp + entropy_target)
        alpha_grad = np.array(
            [-alpha * float(np.mean(logp + cfg.entropy_target))], dtype=self.dtype)
        self.alpha_adam.step([self.log_alpha], [alpha_grad])
        self.total_actor_updates += 1
        entropy = -float(np.mean(logp))
        return loss, entropy

    def update(self, n_updates):
        """Run n critic updates (actor every K-th). Returns aggregate metrics."""
        cfg = self.cfg
        metrics = {"n_critic_updates": 0, "n_actor_updates": 0,
                   "critic_loss": math.nan, "actor_loss": math.nan,
                   "entropy": math.nan, "temperature": self.temperature,
                   "q_mean": math.nan}
        if self.buffer.size < max(cfg.warmup, cfg.batch_size):
            return metrics
        closses, alosses, entropies, qmeans = [], [], [], []
        for i in range(1, n_updates + 1):
            batch = self.buffer.sample(cfg.batch_size)
            y, _ = self.compute_target(batch)
            loss = self.critic_update(batch, y)
            if loss is not None:
                closses.append(loss)
                qmeans.append(float(np.mean(y)))
            if i % cfg.critic_to_actor_ratio == 0:
                aloss, entropy = self.actor_update(batch)
                alosses.append(aloss)
                entropies.append(entropy)
        metrics["n_critic_updates"] = len(closses)
        metrics["n_actor_updates"] = len(alosses)
        if closses:
            metrics["critic_loss"] = float(np.mean(closses))
            metrics["q_mean"] = float(np.mean(qmeans))
        if alosses:
            metrics["actor_loss"] = float(np.mean(alosses))
            metrics["entropy"] = float(np.mean(entropies))
        metrics["temperature"] = self.temperature
        return metrics

    def train_step(self, transition: Transition):
        """Store one transition, then perform G critic updates (actor every K)."""
        self.buffer.add(transition)
        self.env_steps += 1
        return self.update(self.cfg.updates_per_step)

    # -- action selection ------------------------------------------------

    def act(self, obs, goal, deterministic=False):
        sg = np.concatenate([obs, goal])[None, :].astype(self.dtype)
        if deterministic:
            return self.actor.mean_action(sg)[0]
        a, _, _ = self.actor.sample(sg, self.rng)
        return a[0]

    # -- persistence -----------------------------------------------------

    def save(self, path, save_buffer_path=None):
        extra = {
            "alpha_t": self.alpha_adam.t,
            "env_steps": self.env_steps,
            "total_critic_updates": self.total_critic_updates,
            "total_actor_updates": self.total_actor_updates,
        }
        arrays = {
            "log_alpha": self.log_alpha,
            "alpha_m": self.alpha_adam.m[0],
            "alpha_v": self.alpha_adam.v[0],
            "buffer_rng": _pack_rng(self.buffer.rng),
        }
        save_checkpoint(
            path,
            nets={"actor": self.actor.net, "critic": self.critics.online,
                  "critic_target": self.critics.target},
            adams={"actor": self.actor_adam, "critic": self.critic_adam},
            rng=self.rng, extra=extra, arrays=arrays)
        if save_buffer_path is not None:
            self.buffer.save(save_buffer_path)

    @classmethod
    def restore(cls, path, cfg: LearnerConfig, buffer_path=None):
        learner = cls(cfg)
        nets, adams, rng, extra, arrays = load_checkpoint(path)
        learner.actor.net = nets["actor"]
        learner.critics.online = nets["critic"]
        learner.critics.target = nets["critic_target"]
        learner.actor_adam = adams["actor"]
        learner.critic_adam = adams["critic"]
        learner.rng = rng
        learner.log_alpha = arrays["log_alpha"].astype(learner.dtype)
        learner.alpha_adam = Adam([learner.log_alpha], lr=cfg.lr)
        learner.alpha_adam.t = int(extra["alpha_t"])
        learner.alpha_adam.m[0][...] = arrays["alpha_m"]
        learner.alpha_adam.v[0][...] = arrays["alpha_v"]
        learner.env_steps = int(extra["env_steps"])
        learner.total_critic_updates = int(extra["total_critic_updates"])
        learner.total_actor_updates = int(extra["total_actor_updates"])
        if buffer_path is not None:
            learner.buffer = ReplayBuffer.load(buffer_path)
        else:
            _unpack_rng(learner.buffer.rng, arrays["buffer_rng"])
        return learner


def _pack_rng(rng):
    s = json.dumps(rng.bit_generator.state)
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def _unpack_rng(rng, packed):
    rng.bit_generator.state = json.loads(bytes(packed).decode("utf-8"))
