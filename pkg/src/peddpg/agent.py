"""DDPG with an optional permutation-equivariant actor / invariant critic.

Actions handed to the environment are average rates in bits/s.  Inside
the agent they are normalized by the rate ceiling, so the actor's
(0, 1)-squashed output and the critic's action column share one scale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from peddpg.nn import (
    Adam,
    build_actor,
    build_critic,
    hard_update,
    ScaledTanh,
    load_checkpoint,
    save_checkpoint,
    soft_update,
)
from peddpg.nn.checkpoint import CheckpointError
from peddpg.sim import StreamingEnv

__all__ = [
    "AgentConfig",
    "ReplayBuffer",
    "DDPGAgent",
    "EpisodeRecord",
    "safe_layer",
    "deadline_index",
    "noise_std_at",
    "episode_seed",
    "run_episode",
    "random_policy",
    "train",
]


@dataclass
class AgentConfig:
    arch: str = "pe"
    hidden_width: int = 600
    hidden_layers: int = 4
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    soft_update: float = 1e-3
    discount: float = 1.0
    batch_size: int = 512
    replay_capacity: int = 1_000_000
    noise_start: float = 0.3
    noise_end: float = 0.0
    noise_horizon: int = 0  # episodes; 0 means "the whole training run"
    critic_l2: float = 1e-4
    actor_preact_l2: float = 0.0  # L2 on the actor's pre-squash output, per sample
    reward_scale: float = 1.0
    stored_action: str = "safe"  # "safe": after the safe layer; "raw": the actor's own action
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> "AgentConfig":
        if self.arch not in ("fc", "pe"):
            raise ValueError(f"arch must be 'fc' or 'pe', got {self.arch!r}")
        if self.actor_preact_l2 < 0:
            raise ValueError("actor_preact_l2 must be >= 0")
        if self.stored_action not in ("safe", "raw"):
            raise ValueError(f"stored_action must be 'safe' or 'raw', got {self.stored_action!r}")
        if not 0 < self.soft_update <= 1:
            raise ValueError("soft_update must lie in (0, 1]")
        if not 0 <= self.discount <= 1:
            raise ValueError("discount must lie in [0, 1]")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size >= 1")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class ReplayBuffer:
    """Fixed-capacity ring buffer of (s, a, r, s', done) with uniform sampling.

    Storage grows by doubling, so a large nominal capacity costs nothing
    until it is actually filled.
    """

    def __init__(self, capacity, n_users, state_width, dtype=np.float32):
        self.capacity = int(capacity)
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self._shape = (n_users, state_width)
        self._dtype = np.dtype(dtype)
        self._alloc(min(self.capacity, 1024))
        self.size = 0
        self._next = 0

    def _alloc(self, n):
        n_users, width = self._shape
        new = {
            "states": np.zeros((n, n_users, width), dtype=self._dtype),
            "actions": np.zeros((n, n_users), dtype=self._dtype),
            "rewards": np.zeros(n, dtype=self._dtype),
            "next_states": np.zeros((n, n_users, width), dtype=self._dtype),
            "dones": np.zeros(n, dtype=bool),
        }
        for name, arr in new.items():
            old = getattr(self, name, None)
            if old is not None:
                arr[: len(old)] = old
            setattr(self, name, arr)

    def __len__(self):
        return self.size

    def add(self, state, action, reward, next_state, done):
        i = self._next
        if i >= len(self.rewards):
            self._alloc(min(2 * len(self.rewards), self.capacity))
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.choice(self.size, size=min(batch_size, self.size), replace=False)

    def sample(self, batch_size, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        return (self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx])


def deadline_index(frame, frames_per_segment, segments_per_video):
    """l if ``frame == l * N_f`` for some l in 1..N_v-1, else 0."""
    if frame % frames_per_segment == 0 and 1 <= frame // frames_per_segment <= segments_per_video - 1:
        return frame // frames_per_segment
    return 0


def safe_layer(action, delivered_bits, frame, frames_per_segment, segments_per_video, segment_bits, frame_duration):
    """Raise actions at segment deadlines so every user's buffer requirement is met.

    At frame ``t = l N_f`` a user whose bits delivered so far plus this
    frame's scheduled bits fall short of segments 2..l+1 gets exactly the
    deficit (as a rate); all other components, and all other frames, pass
    through unchanged.  The per-BS power limit is not enforced here.
    """
    action = np.array(action, dtype=float)
    l = deadline_index(frame, frames_per_segment, segments_per_video)
    if not l:
        return action
    required = l * np.asarray(segment_bits, dtype=float)
    deficit = (required - np.asarray(delivered_bits, dtype=float)) / frame_duration
    return np.maximum(action, deficit)


def noise_std_at(episode, config: AgentConfig, total_episodes):
    horizon = config.noise_horizon or total_episodes
    if horizon <= 0:
        return config.noise_end
    frac = min(max(episode / horizon, 0.0), 1.0)
    return config.noise_start + (config.noise_end - config.noise_start) * frac


def episode_seed(seed, episode):
    return int(np.random.SeedSequence((seed, episode)).generate_state(1)[0])


class DDPGAgent:
    def __init__(self, config: AgentConfig, n_users, state_width, rate_ceiling):
        self.config = config.validate()
        self.n_users = n_users
        self.state_width = state_width
        self.rate_ceiling = float(rate_ceiling)
        self.dtype = np.dtype(config.dtype)
        self.rng = np.random.default_rng(config.seed)
        dims = (config.arch, n_users, state_width, config.hidden_width, config.hidden_layers)
        self.actor = build_actor(*dims, rng=self.rng, dtype=self.dtype)
        self.critic = build_critic(*dims, rng=self.rng, dtype=self.dtype)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor, lr=config.actor_lr)
        self.critic_opt = Adam(self.critic, lr=config.critic_lr, weight_decay=config.critic_l2)
        self.buffer = ReplayBuffer(config.replay_capacity, n_users, state_width, self.dtype)
        self.noise_std = config.noise_start

    # policy ----------------------------------------------------------------
    def act_normalized(self, state, explore=False):
        a = self.actor.forward(np.asarray(state)[None])[0].astype(float)
        if explore and self.noise_std > 0:
            a = np.clip(a + self.rng.normal(0.0, self.noise_std, size=a.shape), 0.0, 1.0)
        return a

    def act(self, state, explore=False):
        """Average rates (bits/s) for every user."""
        return self.act_normalized(state, explore) * self.rate_ceiling

    def predict(self, states):
        """Greedy rates for a batch of states, shape (batch, K)."""
        return self.actor.forward(np.asarray(states)).astype(float) * self.rate_ceiling

    # learning ----------------------------------------------------------------
    def _stack(self, states, actions):
        return np.concatenate([states, actions[..., None]], axis=-1)

    def critic_targets(self, rewards, next_states, dones):
        next_a = self.actor_target.forward(next_states)
        q_next = self.critic_target.forward(self._stack(next_states, next_a))
        boot = np.where(dones, 0.0, self.config.discount * q_next)
        return rewards / self.config.reward_scale + boot

    def critic_update(self, batch):
        """One Adam step on the critic's squared TD error; returns the pre-step loss."""
        states, actions, rewards, next_states, dones = batch
        if len(states) == 0:
            raise ValueError("empty batch")
        y = self.critic_targets(rewards, next_states, dones).astype(self.dtype)
        q = self.critic.forward(self._stack(states, actions))
        err = q - y
        loss = float(np.mean(err.astype(float) ** 2))
        self.critic.backward(2.0 * err / len(err))
        self.critic_opt.step()
        return loss

    def action_gradient(self, states, actions):
        """dQ/da for each sample, shape (batch, K)."""
        self.critic.forward(self._stack(states, actions))
        d_in = self.critic.backward(np.ones(len(states), dtype=self.dtype), param_grads=False)
        return d_in[..., -1]

    def actor_update(self, batch):
        """One Adam ascent step along the sampled policy gradient; returns its norm."""
        states = batch[0]
        actions = self.actor.forward(states)
        dq_da = self.action_gradient(states, actions)
        squash = next(layer for layer in self.actor.layers if isinstance(layer, ScaledTanh))
        squash.activity_l2 = self.config.actor_preact_l2 / len(states)
        self.actor.backward(-dq_da / len(states))
        squash.activity_l2 = 0.0
        norm = float(np.sqrt(sum(float(np.sum(g.astype(float) ** 2)) for g in self.actor.grads)))
        self.actor_opt.step()
        return norm

    def soft_update(self, rate=None):
        rate = self.config.soft_update if rate is None else rate
        soft_update(self.actor_target, self.actor, rate)
        soft_update(self.critic_target, self.critic, rate)

    def sync_targets(self):
        hard_update(self.actor_target, self.actor)
        hard_update(self.critic_target, self.critic)

    def remember(self, state, action_rate, reward, next_state, done):
        self.buffer.add(state, np.asarray(action_rate) / self.rate_ceiling, reward, next_state, done)

    def learn(self):
        """critic, actor and target updates once the buffer holds a full batch."""
        if len(self.buffer) < self.config.batch_size:
            return None
        batch = self.buffer.sample(self.config.batch_size, self.rng)
        loss = self.critic_update(batch)
        self.actor_update(batch)
        self.soft_update()
        return loss

    # persistence -------------------------------------------------------------
    def shape_signature(self) -> dict:
        return {
            "arch": self.config.arch,
            "n_users": self.n_users,
            "state_width": self.state_width,
            "hidden_width": self.config.hidden_width,
            "hidden_layers": self.config.hidden_layers,
        }

    def save(self, path, extra_meta=None):
        meta = {
            "agent_config": asdict(self.config),
            "signature": self.shape_signature(),
            "rate_ceiling": self.rate_ceiling,
            "noise_std": self.noise_std,
            "rng_state": self.rng.bit_generator.state,
        }
        meta.update(extra_meta or {})
        save_checkpoint(
            path,
            {
                "actor": self.actor,
                "critic": self.critic,
                "actor_target": self.actor_target,
                "critic_target": self.critic_target,
            },
            {"actor": self.actor_opt, "critic": self.critic_opt},
            meta,
        )

    @classmethod
    def load(cls, path, n_users=None, state_width=None) -> "DDPGAgent":
        nets, opts, meta = load_checkpoint(path)
        sig = meta["signature"]
        want = {"n_users": n_users, "state_width": state_width}
        for key, value in want.items():
            if value is not None and sig[key] != value:
                raise CheckpointError(
                    f"checkpoint signature {sig} is incompatible with the configured "
                    f"n_users={n_users}, state_width={state_width}"
                )
        config = AgentConfig(**meta["agent_config"])
        agent = cls.__new__(cls)
        agent.config = config
        agent.n_users = sig["n_users"]
        agent.state_width = sig["state_width"]
        agent.rate_ceiling = float(meta["rate_ceiling"])
        agent.dtype = np.dtype(config.dtype)
        agent.rng = np.random.default_rng()
        agent.rng.bit_generator.state = meta["rng_state"]
        agent.actor = nets["actor"]
        agent.critic = nets["critic"]
        agent.actor_target = nets["actor_target"]
        agent.critic_target = nets["critic_target"]
        agent.actor_opt = Adam(agent.actor, lr=config.actor_lr)
        agent.actor_opt.load_state(opts["actor"])
        agent.critic_opt = Adam(agent.critic, lr=config.critic_lr, weight_decay=config.critic_l2)
        agent.critic_opt.load_state(opts["critic"])
        agent.buffer = ReplayBuffer(config.replay_capacity, agent.n_users, agent.state_width, agent.dtype)
        agent.noise_std = meta["noise_std"]
        return agent


@dataclass
class EpisodeRecord:
    episode: int
    ret: float
    energy: float
    penalty: float
    stalls: int
    noise_std: float
    frames: int
    frame_energy: list = field(default_factory=list)
    frame_penalty: list = field(default_factory=list)
    frame_buffer: list = field(default_factory=list)


def random_policy(rng: np.random.Generator, ceiling):
    """Uniform rates in [0, ceiling] per user and frame."""

    def policy(state):
        return rng.uniform(0.0, ceiling, size=state.shape[0])

    return policy


def run_episode(env: StreamingEnv, policy, seed, episode=0, noise_std=0.0, agent=None, use_safe_layer=True):
    """Roll out one episode; ``agent``, if given, stores experience and learns each frame."""
    cfg = env.config
    state = env.reset(seed=seed)
    rec = EpisodeRecord(episode=episode, ret=0.0, energy=0.0, penalty=0.0, stalls=0, noise_std=noise_std, frames=0)
    while not env.done:
        raw = action = np.asarray(policy(state), dtype=float)
        if use_safe_layer:
            action = safe_layer(
                action,
                env.progress.cumulative_delivered,
                env.t,
                cfg.frames_per_segment,
                cfg.segments_per_video,
                env.segment_bits,
                cfg.frame_duration,
            )
        out = env.step(action)
        if agent is not None:
            stored = raw if agent.config.stored_action == "raw" else action
            agent.remember(state, stored, out.reward, out.next_state, out.done)
            agent.learn()
        energy = float(out.per_user_energy.sum())
        rec.ret += out.reward
        rec.energy += energy
        rec.penalty += out.penalty_term
        rec.stalls += int(out.stalls.sum())
        rec.frames += 1
        rec.frame_energy.append(energy)
        rec.frame_penalty.append(out.penalty_term)
        rec.frame_buffer.append(float(env.progress.buffer_bits.mean()))
        state = out.next_state
    return rec


def train(env: StreamingEnv, agent: DDPGAgent, episodes, seed=0):
    """Yield one EpisodeRecord per training episode."""
    for ep in range(episodes):
        agent.noise_std = noise_std_at(ep, agent.config, episodes)
        yield run_episode(
            env,
            lambda s: agent.act(s, explore=True),
            seed=episode_seed(seed, ep),
            episode=ep,
            noise_std=agent.noise_std,
            agent=agent,
        )
