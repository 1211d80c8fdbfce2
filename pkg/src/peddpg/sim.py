"""Multi-cell video streaming environment.

Base stations sit on a line every ``inter_bs_distance`` metres; users drive
along a parallel road ``road_offset`` metres away.  One environment step is
one frame: the agent picks an average rate per user, each serving BS runs
water-filling over the frame's slots, and playback drains the buffers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
import math

import numpy as np

from peddpg import waterfill

__all__ = [
    "ConfigError",
    "SimConfig",
    "UserKinematics",
    "ChannelSnapshot",
    "UserProgress",
    "StepOutcome",
    "StreamingEnv",
    "advance_mobility",
    "large_scale_gain",
    "path_loss_db",
    "build_state",
]


class ConfigError(ValueError):
    pass


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class SimConfig:
    num_users: int = 10
    num_bs: int = 8
    inter_bs_distance: float = 500.0
    road_offset: float = 200.0
    bandwidth: float = 2e6
    noise_power_dbm: float = -95.0
    max_bs_power_dbm: float = 46.0
    path_loss_intercept: float = 35.3
    path_loss_slope: float = 37.6
    segment_bits: float = 8e6
    segment_bits_per_user: tuple | None = None
    segments_per_video: int = 15
    frames_per_segment: int = 10
    slots_per_frame: int = 1000
    frame_duration: float = 1.0
    history_depth: int = 2
    neighbor_bs: int = 2
    amplifier_efficiency: float = 1.0
    circuit_power: float = 0.0
    initial_speed: float = 16.0
    speed_min: float = 12.0
    speed_max: float = 20.0
    acceleration_std: float = 0.5
    spawn_length: float = 250.0
    penalty_coeff: float = 0.1
    seed: int = 0

    @property
    def slot_duration(self) -> float:
        return self.frame_duration / self.slots_per_frame

    @property
    def noise_power(self) -> float:
        return dbm_to_watt(self.noise_power_dbm)

    @property
    def max_bs_power(self) -> float:
        return dbm_to_watt(self.max_bs_power_dbm)

    @property
    def num_frames(self) -> int:
        return self.segments_per_video * self.frames_per_segment

    @property
    def state_width(self) -> int:
        return 4 + (self.history_depth + 1) * self.neighbor_bs

    @property
    def road_length(self) -> float:
        return (self.num_bs - 1) * self.inter_bs_distance

    def user_segment_bits(self) -> np.ndarray:
        if self.segment_bits_per_user is None:
            return np.full(self.num_users, float(self.segment_bits))
        return np.asarray(self.segment_bits_per_user, dtype=float)

    def validate(self) -> "SimConfig":
        if self.num_users < 1:
            raise ConfigError("num_users must be >= 1")
        if self.num_bs < 2:
            raise ConfigError("num_bs must be >= 2")
        if not 1 <= self.neighbor_bs <= self.num_bs:
            raise ConfigError("neighbor_bs must lie in [1, num_bs]")
        if self.history_depth < 0:
            raise ConfigError("history_depth must be >= 0")
        if self.segments_per_video < 2 or self.frames_per_segment < 1 or self.slots_per_frame < 1:
            raise ConfigError("need >= 2 segments, >= 1 frame per segment and >= 1 slot per frame")
        if not self.speed_min <= self.initial_speed <= self.speed_max:
            raise ConfigError("initial_speed outside [speed_min, speed_max]")
        if self.segment_bits_per_user is not None and len(self.segment_bits_per_user) != self.num_users:
            raise ConfigError("segment_bits_per_user needs one entry per user")
        travel = self.spawn_length + self.speed_max * self.num_frames * self.frame_duration
        if travel > self.road_length:
            raise ConfigError(
                f"road of {self.road_length:.0f} m is shorter than the worst-case "
                f"episode travel of {travel:.0f} m; add base stations"
            )
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class UserKinematics:
    position: float
    velocity: float


@dataclass
class ChannelSnapshot:
    large_scale_gains: np.ndarray  # (K, N_b), strongest first
    association: np.ndarray  # (K,) serving BS index
    small_scale_gains: np.ndarray  # (K, N_s)


@dataclass
class UserProgress:
    buffer_bits: np.ndarray
    playback_frame: np.ndarray
    downloaded_fraction: np.ndarray
    cumulative_delivered: np.ndarray
    current_segment: np.ndarray


@dataclass
class StepOutcome:
    reward: float
    next_state: np.ndarray
    per_user_energy: np.ndarray
    penalty_term: float
    done: bool
    per_user_delivered_bits: np.ndarray
    stalls: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    bs_energy: np.ndarray = field(default_factory=lambda: np.zeros(0))


def advance_mobility(kin: UserKinematics, rng: np.random.Generator, config: SimConfig) -> UserKinematics:
    """One frame of random-acceleration motion with clamped speed."""
    accel = rng.normal(0.0, config.acceleration_std)
    v = min(max(kin.velocity + accel * config.frame_duration, config.speed_min), config.speed_max)
    return UserKinematics(position=kin.position + v * config.frame_duration, velocity=v)


def path_loss_db(distance, config: SimConfig):
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    return config.path_loss_intercept + config.path_loss_slope * np.log10(d)


def large_scale_gain(position, bs_index, config: SimConfig):
    """Linear gain from a road position to BS ``bs_index`` (array-friendly)."""
    dx = np.asarray(position, dtype=float) - np.asarray(bs_index) * config.inter_bs_distance
    d = np.hypot(dx, config.road_offset)
    return 10.0 ** (-path_loss_db(d, config) / 10.0)


def _gain_db_range(config: SimConfig) -> tuple[float, float]:
    best = -float(path_loss_db(config.road_offset, config))
    far = math.hypot(config.neighbor_bs * config.inter_bs_distance, config.road_offset)
    worst = -float(path_loss_db(far, config))
    return worst, best


def build_state(progress: UserProgress, association, history, config: SimConfig, segment_bits=None) -> np.ndarray:
    """Assemble the normalized K x (4 + (N_t+1) N_b) observation.

    ``history`` has shape (N_t+1, K, N_b), oldest frame first.  Every row
    depends only on that user's own entries.
    """
    seg = config.user_segment_bits() if segment_bits is None else np.asarray(segment_bits)
    lo, hi = _gain_db_range(config)
    hist_db = 10.0 * np.log10(np.asarray(history))
    hist = (hist_db - lo) / (hi - lo)
    k = hist.shape[1]
    alpha_cols = np.transpose(hist, (1, 0, 2)).reshape(k, -1)
    head = np.column_stack(
        [
            progress.buffer_bits / seg,
            progress.playback_frame / config.frames_per_segment,
            progress.downloaded_fraction,
            (np.asarray(association) + 1.0) / config.num_bs,
        ]
    )
    return np.hstack([head, alpha_cols])


class StreamingEnv:
    """Seedable K-user environment; one ``step`` per frame.

    Each user owns two random streams (mobility and fading) spawned from
    the episode seed, so reordering users at ``reset`` reorders every
    per-user quantity of the episode identically.
    """

    def __init__(self, config: SimConfig):
        self.config = config.validate()
        self.alpha_best = float(large_scale_gain(0.0, 0, config))
        self.rate_ceiling = waterfill.rate_ceiling(
            self.alpha_best, config.max_bs_power, config.bandwidth, config.noise_power
        )
        self._seg = config.user_segment_bits()
        self.t = 0
        self.done = True

    # requirement helpers -------------------------------------------------
    def deadline_index(self, t: int) -> int:
        """Segment index l if frame ``t`` is the deadline t = l N_f (l < N_v), else 0."""
        nf = self.config.frames_per_segment
        if t % nf == 0 and 1 <= t // nf <= self.config.segments_per_video - 1:
            return t // nf
        return 0

    def requirement(self, l: int) -> np.ndarray:
        """Bits of segments 2..l+1 per user."""
        return l * self.segment_bits

    @property
    def segment_bits(self) -> np.ndarray:
        return self._seg

    @property
    def video_bits(self) -> np.ndarray:
        return (self.config.segments_per_video - 1) * self._seg

    # lifecycle -------------------------------------------------------------
    def reset(self, seed: int | None = None, user_order=None) -> np.ndarray:
        cfg = self.config
        k = cfg.num_users
        seed = cfg.seed if seed is None else seed
        order = np.arange(k) if user_order is None else np.asarray(user_order)
        if sorted(order.tolist()) != list(range(k)):
            raise ValueError("user_order must be a permutation of range(num_users)")
        self.user_order = order
        self._seg = cfg.user_segment_bits()[order]
        children = np.random.SeedSequence(seed).spawn(k)
        self._mob_rng = []
        self._fad_rng = []
        for i in order:
            mob, fad = children[i].spawn(2)
            self._mob_rng.append(np.random.default_rng(mob))
            self._fad_rng.append(np.random.default_rng(fad))
        self.kinematics = [
            UserKinematics(position=float(rng.uniform(0.0, cfg.spawn_length)), velocity=cfg.initial_speed)
            for rng in self._mob_rng
        ]
        self.progress = UserProgress(
            buffer_bits=self._seg.copy(),
            playback_frame=np.ones(k),
            downloaded_fraction=np.zeros(k),
            cumulative_delivered=np.zeros(k),
            current_segment=np.ones(k, dtype=int),
        )
        self.stall_count = np.zeros(k, dtype=int)
        self.t = 1
        self.done = False
        self.channel = self._observe_channel()
        # replicate the first frame into every history slot
        self.history = np.repeat(self.channel.large_scale_gains[None], cfg.history_depth + 1, axis=0)
        return self.state()

    def _observe_channel(self) -> ChannelSnapshot:
        cfg = self.config
        bs = np.arange(cfg.num_bs)
        pos = np.array([kin.position for kin in self.kinematics])
        all_gains = large_scale_gain(pos[:, None], bs[None, :], cfg)
        order = np.argsort(-all_gains, axis=1, kind="stable")
        top = np.take_along_axis(all_gains, order[:, : cfg.neighbor_bs], axis=1)
        fading = np.stack([rng.exponential(1.0, size=cfg.slots_per_frame) for rng in self._fad_rng])
        self.all_gains = all_gains
        return ChannelSnapshot(large_scale_gains=top, association=order[:, 0], small_scale_gains=fading)

    def state(self) -> np.ndarray:
        return build_state(self.progress, self.channel.association, self.history, self.config, self._seg)

    @property
    def serving_gain(self) -> np.ndarray:
        return self.channel.large_scale_gains[:, 0]

    def step(self, action) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.config
        action = np.asarray(action, dtype=float)
        if action.shape != (cfg.num_users,):
            raise ValueError(f"action must have shape ({cfg.num_users},), got {action.shape}")
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")
        if np.any(action < 0):
            raise ValueError("action must be non-negative")

        alpha = self.serving_gain
        sol = waterfill.water_level_for_rate(alpha, action, cfg.bandwidth, cfg.noise_power)
        alloc = waterfill.slot_powers(
            alpha,
            sol.water_level,
            self.channel.small_scale_gains,
            cfg.bandwidth,
            cfg.noise_power,
            cfg.slot_duration,
            efficiency=cfg.amplifier_efficiency,
            circuit_power=cfg.circuit_power,
            frame_duration=cfg.frame_duration,
        )
        radiated = cfg.slot_duration * alloc.powers.sum(axis=1)
        assoc = self.channel.association
        # penalty exactly as the reward formula: sum over m and k of (E_k I(m,k) - P_max dT)^+
        cap = cfg.max_bs_power * cfg.frame_duration
        indicator = assoc[None, :] == np.arange(cfg.num_bs)[:, None]
        penalty = float(np.maximum(radiated[None, :] * indicator - cap, 0.0)[indicator].sum())
        bs_energy = (radiated[None, :] * indicator).sum(axis=1)
        energy = alloc.transmit_energy
        reward = -float(energy.sum()) - cfg.penalty_coeff * penalty

        bits = alloc.delivered_bits
        prog = self.progress
        prog.cumulative_delivered = prog.cumulative_delivered + bits
        prog.downloaded_fraction = np.minimum(prog.cumulative_delivered / self.video_bits, 1.0)
        drain = self._seg / cfg.frames_per_segment
        prog.buffer_bits = np.maximum(prog.buffer_bits + bits - drain, 0.0)

        stalls = np.zeros(cfg.num_users, dtype=int)
        l = self.deadline_index(self.t)
        if l:
            short = prog.cumulative_delivered < self.requirement(l) * (1.0 - 1e-12)
            stalls = short.astype(int)
            self.stall_count += stalls

        wrap = prog.playback_frame >= cfg.frames_per_segment
        prog.playback_frame = np.where(wrap, 1.0, prog.playback_frame + 1.0)
        prog.current_segment = prog.current_segment + wrap

        self.t += 1
        self.done = bool(np.all(prog.downloaded_fraction >= 1.0) or self.t > cfg.num_frames)

        self.kinematics = [advance_mobility(kin, rng, cfg) for kin, rng in zip(self.kinematics, self._mob_rng)]
        self.channel = self._observe_channel()
        self.history = np.concatenate([self.history[1:], self.channel.large_scale_gains[None]], axis=0)

        return StepOutcome(
            reward=reward,
            next_state=self.state(),
            per_user_energy=energy,
            penalty_term=penalty,
            done=self.done,
            per_user_delivered_bits=bits,
            stalls=stalls,
            bs_energy=bs_energy,
        )

    def large_scale_trajectory(self, seed: int | None = None, user_order=None):
        """Serving gains and serving BS for every frame, each of shape (T, K).

        Mobility and fading never depend on actions, so a zero-rate rollout
        on a scratch copy reveals the full trajectory.
        """
        scratch = copy.deepcopy(self)
        scratch.reset(seed=seed, user_order=user_order)
        gains, assoc = [], []
        zeros = np.zeros(self.config.num_users)
        while True:
            gains.append(scratch.serving_gain.copy())
            assoc.append(scratch.channel.association.copy())
            scratch.step(zeros)
            if scratch.done:
                break
        return np.array(gains), np.array(assoc)
