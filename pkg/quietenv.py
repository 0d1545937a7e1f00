"""
Vectorized quiet-walking environment.

Observations, the 24-dim action mapping, the 14-term reward bank with
per-phase scales, the noisy -> quiet curriculum latch, domain randomization,
command sampling and termination, all batched over N robots on top of rigidsim.
"""
import logging
from collections import deque
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.special import expit

from rigidsim import (
    N_JOINTS,
    N_LEGS,
    ActuatorCommand,
    ContactReport,
    DivergedStateError,
    RobotModel,
    SimState,
    Terrain,
    _Batched,
    apply_velocity_impulse,
    base_roll_pitch,
    base_velocity_in_body,
    foot_kinematics,
    gravity_orientation,
    pd_torques,
    quat_from_yaw,
    step,
    trunk_ground_contact,
)

logger = logging.getLogger(__name__)

ACTION_DIM = 2 * N_JOINTS

REWARD_TERMS = (
    "lin_vel_tracking",
    "ang_vel_tracking",
    "joint_torque",
    "base_lin_vel_z",
    "base_orientation",
    "base_ang_vel",
    "foot_slippage",
    "self_collisions",
    "foot_air_time",
    "joint_target_diff",
    "gain_scale_diff",
    "foot_contact_velocity",
    "joint_acceleration",
    "base_ang_acceleration",
)
TRACKING_TERMS = ("lin_vel_tracking", "ang_vel_tracking")
NOISY_WALKING_TERMS = ("foot_contact_velocity", "joint_acceleration", "base_ang_acceleration")


class EnvError(Exception):
    """Base exception for environment errors."""
    pass


class InvalidActionError(EnvError):
    """Raised when a policy action is malformed or non-finite."""
    pass


class ConfigError(EnvError):
    """Configuration validation error carrying the JSON path of the offending value."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path

    @classmethod
    def from_validation(cls, error: ValidationError, prefix: str = "$") -> "ConfigError":
        first = error.errors()[0]
        path = prefix + "".join(f"[{part}]" if isinstance(part, int) else f".{part}" for part in first["loc"])
        return cls(first["msg"], path)


class Phase(str, Enum):
    NOISY = "noisy"
    QUIET = "quiet"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class PhaseScales(BaseModel):
    """Reward scales of one curriculum phase; defaults are the noisy-walking column."""
    model_config = ConfigDict(extra="forbid")

    lin_vel_tracking: float = 1.0
    ang_vel_tracking: float = 1.0
    joint_torque: float = -0.015
    base_lin_vel_z: float = -3.0
    base_orientation: float = -5.0
    base_ang_vel: float = -0.05
    foot_slippage: float = -0.15
    self_collisions: float = -10.0
    foot_air_time: float = 2.0
    joint_target_diff: float = -0.02
    gain_scale_diff: float = -0.005
    foot_contact_velocity: float = -5.0
    joint_acceleration: float = -2e-7
    base_ang_acceleration: float = -5e-5


def _quiet_scales() -> PhaseScales:
    return PhaseScales(foot_contact_velocity=-25.0, joint_acceleration=-4e-7, base_ang_acceleration=-1e-4)


class RewardScales(BaseModel):
    model_config = ConfigDict(extra="forbid")

    noisy: PhaseScales = Field(default_factory=PhaseScales)
    quiet: PhaseScales = Field(default_factory=_quiet_scales)

    def for_phase(self, phase: Phase) -> PhaseScales:
        return self.quiet if Phase(phase) is Phase.QUIET else self.noisy


class NoiseConfig(BaseModel):
    """Uniform observation noise half-widths."""
    model_config = ConfigDict(extra="forbid")

    joint_positions: float = Field(0.01, ge=0.0, description="rad")
    joint_velocities: float = Field(1.5, ge=0.0, description="rad/s")
    last_actions: float = Field(0.0, ge=0.0)
    contacts: float = Field(0.0, ge=0.0)
    gravity: float = Field(0.05, ge=0.0)
    gyro: float = Field(0.2, ge=0.0, description="rad/s")


def _check_range(value: Tuple[float, float]) -> Tuple[float, float]:
    if value[0] > value[1]:
        raise ValueError(f"range min {value[0]} exceeds max {value[1]}")
    return value


class CommandRanges(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lin_vel_x: Tuple[float, float] = (-0.15, 0.30)
    lin_vel_y: Tuple[float, float] = (-0.10, 0.10)
    ang_vel_z: Tuple[float, float] = (-0.6, 0.6)

    @field_validator("lin_vel_x", "lin_vel_y", "ang_vel_z")
    @classmethod
    def ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _check_range(value)


class RandomizationRanges(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_mass_delta: Tuple[float, float] = Field((-0.4, 0.4), description="kg")
    velocity_disturbance: Tuple[float, float] = Field((-0.2, 0.2), description="m/s per axis, every disturbance period")
    external_force: Tuple[float, float] = Field((0.0, 0.4), description="N, fixed random direction per episode")
    external_torque: Tuple[float, float] = Field((0.0, 0.1), description="N m, fixed random direction per episode")
    terrain_height: Tuple[float, float] = Field((0.002, 0.01), description="m, height-field amplitude")
    friction: Tuple[float, float] = (0.4, 0.7)

    @field_validator(
        "base_mass_delta", "velocity_disturbance", "external_force",
        "external_torque", "terrain_height", "friction",
    )
    @classmethod
    def ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _check_range(value)

    @field_validator("external_force", "external_torque", "terrain_height")
    @classmethod
    def non_negative(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] < 0.0:
            raise ValueError("range must be non-negative")
        return value

    @field_validator("friction")
    @classmethod
    def positive_friction(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] <= 0.0:
            raise ValueError("friction coefficient must be positive")
        return value


class EnvConfig(BaseModel):
    """Every environment tunable; the single source of truth for an experiment's env side."""
    model_config = ConfigDict(extra="forbid")

    control_dt: float = Field(0.01, gt=0.0, description="Policy period in s (100 Hz)")
    sim_dt: float = Field(0.0025, gt=0.0, description="Physics step in s (400 Hz)")
    sim_substeps: int = Field(4, ge=1)
    episode_length: float = Field(20.0, gt=0.0, description="Maximum episode duration in s")
    init_joint_noise: float = Field(0.05, ge=0.0, description="Uniform joint perturbation at reset in rad")
    action_scale: float = Field(0.25, gt=0.0)
    action_clip: float = Field(4.0, gt=0.0)
    gain_clip: float = Field(6.0, gt=0.0)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    commands: CommandRanges = Field(default_factory=CommandRanges)
    rewards: RewardScales = Field(default_factory=RewardScales)
    randomization: RandomizationRanges = Field(default_factory=RandomizationRanges)
    tracking_sigma: float = Field(0.06, gt=0.0)
    air_time_target: float = Field(0.2, ge=0.0, description="s")
    curriculum_threshold: float = 1.5
    curriculum_window: int = Field(100, ge=1)
    curriculum_enabled: bool = True
    initial_phase: Phase = Phase.NOISY
    disturbance_period: float = Field(4.0, gt=0.0, description="s")
    contact_velocity_mode: Literal["touchdown", "continuous"] = "touchdown"
    include_gyro_observation: bool = True
    observe_contacts: bool = True
    learn_gains: bool = True
    fixed_gain_input: float = Field(0.0, description="Gain input x used when gains are not learned")
    randomize_initial_yaw: bool = True
    terrain_mode: Literal["heightfield", "flat", "ramp"] = "heightfield"
    slope_angle: float = Field(0.0, ge=0.0, lt=np.pi / 2, description="Ramp angle in rad")
    fall_angle: float = Field(1.0, gt=0.0, description="Roll/pitch termination threshold in rad")

    @model_validator(mode="after")
    def check_timing(self) -> "EnvConfig":
        if abs(self.sim_substeps * self.sim_dt - self.control_dt) > 1e-12:
            raise ValueError(
                f"sim_substeps * sim_dt must equal control_dt ({self.sim_substeps} * {self.sim_dt} != {self.control_dt})"
            )
        return self

    @property
    def obs_dim(self) -> int:
        return 4 * N_JOINTS + N_LEGS + 3 + 3 + (3 if self.include_gyro_observation else 0)

    @property
    def max_episode_steps(self) -> int:
        return int(round(self.episode_length / self.control_dt))


def parse_env_config(document: Dict[str, Any], prefix: str = "$.env") -> EnvConfig:
    try:
        return EnvConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError.from_validation(e, prefix) from e


# ---------------------------------------------------------------------------
# Episode containers
# ---------------------------------------------------------------------------

@dataclass
class DomainSample(_Batched):
    base_mass_delta: np.ndarray   # (N,) kg
    external_force: np.ndarray    # (N, 3) N, world frame
    external_torque: np.ndarray   # (N, 3) N m, base frame
    friction: np.ndarray          # (N,)
    terrain_amplitude: np.ndarray  # (N,) m


@dataclass
class EpisodeState(_Batched):
    command: np.ndarray                 # (N, 3) v*_x, v*_y, w*_z
    last_action: np.ndarray             # (N, 12) a* of this step
    last_gain_action: np.ndarray        # (N, 12) gain* of this step
    previous_action: np.ndarray         # (N, 12) a* of the previous step
    previous_gain_action: np.ndarray    # (N, 12)
    quiet_phase: np.ndarray             # (N,) bool
    tracking_score: np.ndarray          # (N,) accumulated episodic tracking score
    time_since_disturbance: np.ndarray  # (N,) s
    base_mass_delta: np.ndarray         # (N,) kg
    external_force: np.ndarray          # (N, 3) N
    external_torque: np.ndarray         # (N, 3) N m
    friction: np.ndarray                # (N,)
    terrain_amplitude: np.ndarray       # (N,) m
    elapsed: np.ndarray                 # (N,) s

    @property
    def phase(self) -> List[Phase]:
        return [Phase.QUIET if quiet else Phase.NOISY for quiet in self.quiet_phase]


@dataclass
class Observation:
    vector: np.ndarray  # (N, obs_dim)

    @staticmethod
    def layout(config: EnvConfig) -> List[Tuple[str, int]]:
        groups = [
            ("joint_positions", N_JOINTS),
            ("joint_velocities", N_JOINTS),
            ("last_actions", N_JOINTS),
            ("last_gain_actions", N_JOINTS),
            ("contacts", N_LEGS),
            ("gravity", 3),
            ("command", 3),
        ]
        if config.include_gyro_observation:
            groups.append(("gyro", 3))
        return groups

    def group(self, config: EnvConfig, name: str) -> np.ndarray:
        start = 0
        for group_name, width in self.layout(config):
            if group_name == name:
                return self.vector[:, start:start + width]
            start += width
        raise KeyError(name)


@dataclass
class RewardBreakdown(_Batched):
    """Per-term rewards, each already multiplied by its phase scale and control_dt."""
    lin_vel_tracking: np.ndarray
    ang_vel_tracking: np.ndarray
    joint_torque: np.ndarray
    base_lin_vel_z: np.ndarray
    base_orientation: np.ndarray
    base_ang_vel: np.ndarray
    foot_slippage: np.ndarray
    self_collisions: np.ndarray
    foot_air_time: np.ndarray
    joint_target_diff: np.ndarray
    gain_scale_diff: np.ndarray
    foot_contact_velocity: np.ndarray
    joint_acceleration: np.ndarray
    base_ang_acceleration: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return np.sum([getattr(self, name) for name in REWARD_TERMS], axis=0)

    @property
    def tracking(self) -> np.ndarray:
        return self.lin_vel_tracking + self.ang_vel_tracking

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class EnvStep(NamedTuple):
    state: SimState
    episode: EpisodeState
    observation: Observation
    rewards: RewardBreakdown
    done: np.ndarray    # (N,) bool
    reason: np.ndarray  # (N,) str, "" while running
    info: Dict[str, Any]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, bounds: Tuple[float, float], size) -> np.ndarray:
    return rng.uniform(bounds[0], bounds[1], size=size) if bounds[1] > bounds[0] else np.full(size, float(bounds[0]))


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def sample_command(config: EnvConfig, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Uniform (v*_x, v*_y, w*_z) commands within the configured ranges, (N, 3)."""
    ranges = config.commands
    return np.stack([
        _uniform(rng, ranges.lin_vel_x, n),
        _uniform(rng, ranges.lin_vel_y, n),
        _uniform(rng, ranges.ang_vel_z, n),
    ], axis=1)


def randomize(config: EnvConfig, rng: np.random.Generator, n: int = 1) -> DomainSample:
    """
    Fresh per-episode domain randomization sample.

    External force and torque magnitudes are uniform in their ranges with a
    direction uniform on the sphere, fixed for the episode.
    """
    ranges = config.randomization
    force = _uniform(rng, ranges.external_force, n)[:, None] * _unit_vectors(rng, n)
    torque = _uniform(rng, ranges.external_torque, n)[:, None] * _unit_vectors(rng, n)
    return DomainSample(
        base_mass_delta=_uniform(rng, ranges.base_mass_delta, n),
        external_force=force,
        external_torque=torque,
        friction=_uniform(rng, ranges.friction, n),
        terrain_amplitude=_uniform(rng, ranges.terrain_height, n),
    )


def sample_velocity_disturbance(config: EnvConfig, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Horizontal base velocity impulse, uniform per axis; z is left untouched."""
    bounds = config.randomization.velocity_disturbance
    return np.stack([_uniform(rng, bounds, n), _uniform(rng, bounds, n), np.zeros(n)], axis=1)


def make_terrain(config: EnvConfig, sample: DomainSample, rng: np.random.Generator) -> Terrain:
    if config.terrain_mode == "ramp":
        return Terrain.ramp(config.slope_angle, n=sample.batch_size, friction=sample.friction)
    if config.terrain_mode == "flat":
        return Terrain.flat(n=sample.batch_size, friction=sample.friction)
    return Terrain.random_heightfield(sample.terrain_amplitude, sample.friction, rng)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def reset(config: EnvConfig, model: RobotModel, rng: np.random.Generator, n: int = 1,
          phase: Phase = Phase.NOISY) -> Tuple[SimState, EpisodeState, Observation, Terrain]:
    """
    Start N fresh episodes.

    Args:
        config (EnvConfig): Environment configuration
        model (RobotModel): Robot description
        rng (np.random.Generator): Source of every random draw
        n (int): Number of robots
        phase (Phase): Curriculum phase of the global latch

    Returns:
        Tuple[SimState, EpisodeState, Observation, Terrain]: initial state, episode
        bookkeeping, first observation and the freshly generated terrain
    """
    sample = randomize(config, rng, n)
    terrain = make_terrain(config, sample, rng)
    command = sample_command(config, rng, n)

    state = SimState.standing(model, n)
    perturbation = rng.uniform(-config.init_joint_noise, config.init_joint_noise, size=(n, N_JOINTS))
    yaw = rng.uniform(-np.pi, np.pi, size=n) if config.randomize_initial_yaw else np.zeros(n)
    state = replace(state,
                    joint_positions=state.joint_positions + perturbation,
                    base_orientation=quat_from_yaw(yaw))
    feet, _ = foot_kinematics(model, state)
    ground, _ = terrain.surface(feet[..., :2])
    state.base_position[:, 2] += ground.max(axis=1)

    default = np.tile(model.arrays.default_pose, (n, 1))
    gain = _gain_input(config, np.zeros((n, N_JOINTS)))
    episode = EpisodeState(
        command=command,
        last_action=default.copy(),
        last_gain_action=gain.copy(),
        previous_action=default.copy(),
        previous_gain_action=gain.copy(),
        quiet_phase=np.full(n, Phase(phase) is Phase.QUIET),
        tracking_score=np.zeros(n),
        time_since_disturbance=np.zeros(n),
        base_mass_delta=sample.base_mass_delta,
        external_force=sample.external_force,
        external_torque=sample.external_torque,
        friction=sample.friction,
        terrain_amplitude=sample.terrain_amplitude,
        elapsed=np.zeros(n),
    )
    contact = _idle_contact(state)
    return state, episode, observe(config, state, contact, episode, rng), terrain


def _gain_input(config: EnvConfig, raw_gain: np.ndarray) -> np.ndarray:
    if not config.learn_gains:
        return np.full_like(raw_gain, config.fixed_gain_input)
    return np.clip(raw_gain, -config.gain_clip, config.gain_clip)


def apply_action(config: EnvConfig, model: RobotModel, raw_action: np.ndarray) -> ActuatorCommand:
    """
    Map raw policy outputs to an actuator command.

    The first 12 entries are clipped to +-action_clip and become absolute targets
    a* = default_pose + action_scale * a, clamped to joint limits. The last 12 are
    clipped to +-gain_clip and become the gain inputs x.
    """
    raw_action = np.atleast_2d(np.asarray(raw_action, dtype=float))
    if raw_action.shape[-1] != ACTION_DIM:
        raise InvalidActionError(f"action must have {ACTION_DIM} entries, got {raw_action.shape[-1]}")
    if not np.all(np.isfinite(raw_action)):
        raise InvalidActionError("action contains non-finite values")
    arr = model.arrays
    offsets = np.clip(raw_action[:, :N_JOINTS], -config.action_clip, config.action_clip)
    targets = np.clip(arr.default_pose + config.action_scale * offsets, arr.limits_lo, arr.limits_hi)
    return ActuatorCommand(target_joint_positions=targets, gain_inputs=_gain_input(config, raw_action[:, N_JOINTS:]))


def _noise(rng: np.random.Generator, level: float, shape) -> np.ndarray:
    if level == 0.0:
        return np.zeros(shape)
    return rng.uniform(-level, level, size=shape)


def observe(config: EnvConfig, state: SimState, contact: ContactReport, episode: EpisodeState,
            rng: np.random.Generator) -> Observation:
    """Concatenate the observation groups in layout order, each with uniform noise of its level."""
    n = state.batch_size
    noise = config.noise
    contacts = contact.in_contact.astype(float) if config.observe_contacts else np.zeros((n, N_LEGS))
    parts = [
        state.joint_positions + _noise(rng, noise.joint_positions, (n, N_JOINTS)),
        state.joint_velocities + _noise(rng, noise.joint_velocities, (n, N_JOINTS)),
        episode.last_action + _noise(rng, noise.last_actions, (n, N_JOINTS)),
        episode.last_gain_action + _noise(rng, noise.last_actions, (n, N_JOINTS)),
        contacts + _noise(rng, noise.contacts, (n, N_LEGS)),
        gravity_orientation(state) + _noise(rng, noise.gravity, (n, 3)),
        episode.command,
    ]
    if config.include_gyro_observation:
        parts.append(state.base_angular_velocity + _noise(rng, noise.gyro, (n, 3)))
    return Observation(vector=np.concatenate(parts, axis=1))


def _phase_scale(config: EnvConfig, quiet: np.ndarray, term: str) -> np.ndarray:
    return np.where(quiet, getattr(config.rewards.quiet, term), getattr(config.rewards.noisy, term))


def compute_rewards(config: EnvConfig, quiet_phase: np.ndarray, model: RobotModel, state: SimState,
                    state_prev: SimState, contact: ContactReport, episode: EpisodeState,
                    torques: np.ndarray) -> RewardBreakdown:
    """
    Evaluate the 14-term reward bank for one control step.

    Args:
        config (EnvConfig): Environment configuration (scales, sigma, dt)
        quiet_phase (np.ndarray): (N,) True where the quiet-walking scales apply
        model (RobotModel): Robot description
        state (SimState): State at the end of the control step
        state_prev (SimState): State one control step earlier
        contact (ContactReport): Contact report aggregated over the control step
        episode (EpisodeState): Episode bookkeeping holding a*_t, a*_{t-1}, gain*_t, gain*_{t-1}
        torques (np.ndarray): (N, 12) joint torques applied during the step

    Returns:
        RewardBreakdown: every term multiplied by its phase scale and control_dt
    """
    dt = config.control_dt
    quiet = np.broadcast_to(np.asarray(quiet_phase, dtype=bool), (state.batch_size,))
    velocity = base_velocity_in_body(state)
    gravity = gravity_orientation(state)
    _, foot_velocity = foot_kinematics(model, state)
    joint_accel = (state.joint_velocities - state_prev.joint_velocities) / dt
    base_accel = (state.base_angular_velocity - state_prev.base_angular_velocity) / dt

    lin_error = np.sum((episode.command[:, :2] - velocity[:, :2]) ** 2, axis=1)
    ang_error = (episode.command[:, 2] - state.base_angular_velocity[:, 2]) ** 2
    slip = np.where(contact.in_contact, np.sum(foot_velocity[..., :2] ** 2, axis=-1), 0.0)
    if config.contact_velocity_mode == "touchdown":
        impact = np.sum(np.where(contact.touchdown, contact.touchdown_speed ** 2, 0.0), axis=1)
    else:
        impact = np.sum(np.where(contact.in_contact, np.sum(foot_velocity ** 2, axis=-1), 0.0), axis=1)

    raw = {
        "lin_vel_tracking": np.exp(-lin_error / config.tracking_sigma),
        "ang_vel_tracking": np.exp(-ang_error / config.tracking_sigma),
        "joint_torque": np.sum(torques ** 2, axis=1),
        "base_lin_vel_z": velocity[:, 2] ** 2,
        "base_orientation": np.sum(gravity[:, :2] ** 2, axis=1),
        "base_ang_vel": np.sum(state.base_angular_velocity[:, :2] ** 2, axis=1),
        "foot_slippage": np.sum(slip, axis=1),
        "self_collisions": contact.self_collision_count.astype(float),
        "foot_air_time": np.sum(np.where(contact.touchdown, contact.touchdown_air_time - config.air_time_target, 0.0), axis=1),
        "joint_target_diff": np.sum((episode.previous_action - episode.last_action) ** 2, axis=1),
        "gain_scale_diff": np.sum((episode.previous_gain_action - episode.last_gain_action) ** 2, axis=1),
        "foot_contact_velocity": impact,
        "joint_acceleration": np.sum(joint_accel ** 2, axis=1),
        "base_ang_acceleration": np.sum(base_accel[:, :2] ** 2, axis=1),
    }
    return RewardBreakdown(**{term: raw[term] * _phase_scale(config, quiet, term) * dt for term in REWARD_TERMS})


def _idle_contact(state: SimState) -> ContactReport:
    n = state.batch_size
    return ContactReport(
        in_contact=state.foot_in_contact.copy(),
        normal_force=np.zeros((n, N_LEGS)),
        tangential_force=np.zeros((n, N_LEGS)),
        foot_velocity=np.zeros((n, N_LEGS, 3)),
        touchdown=np.zeros((n, N_LEGS), dtype=bool),
        touchdown_speed=np.zeros((n, N_LEGS)),
        touchdown_air_time=np.zeros((n, N_LEGS)),
        air_time=state.foot_air_time.copy(),
        slip_velocity=np.zeros((n, N_LEGS, 2)),
        self_collision_count=np.zeros(n, dtype=np.int64),
    )


def _aggregate_contacts(reports: List[ContactReport], foot_velocity: np.ndarray) -> ContactReport:
    """
    Merge substep reports into one control-step report.

    Switch state, forces, air time and self-collisions come from the last
    substep; a touchdown in any substep counts, with its own speed and air time.
    A foot that touched down and lifted again within the step is still reported
    in contact, so touchdown implies in_contact.
    """
    last = reports[-1]
    touchdown = np.zeros_like(last.touchdown)
    speed = np.zeros_like(last.touchdown_speed)
    air = np.zeros_like(last.touchdown_air_time)
    for report in reports:
        first = report.touchdown & ~touchdown
        speed = np.where(first, report.touchdown_speed, speed)
        air = np.where(first, report.touchdown_air_time, air)
        touchdown |= report.touchdown
    in_contact = last.in_contact | touchdown
    return replace(
        last,
        in_contact=in_contact,
        foot_velocity=foot_velocity,
        touchdown=touchdown,
        touchdown_speed=speed,
        touchdown_air_time=air,
        slip_velocity=np.where(in_contact[..., None], foot_velocity[..., :2], 0.0),
    )


def step_env(config: EnvConfig, model: RobotModel, terrain: Terrain, state: SimState, episode: EpisodeState,
             raw_action: np.ndarray, rng: np.random.Generator) -> EnvStep:
    """
    Advance N environments by one control step.

    The actuator command is held for sim_substeps physics steps with pd_torques
    re-evaluated every substep. Diverged rows are rolled back to their last
    finite state and terminated with reason "diverged".
    """
    n = state.batch_size
    cmd = apply_action(config, model, raw_action)
    episode = replace(
        episode,
        previous_action=episode.last_action.copy(),
        previous_gain_action=episode.last_gain_action.copy(),
        last_action=cmd.target_joint_positions.copy(),
        last_gain_action=cmd.gain_inputs.copy(),
        time_since_disturbance=episode.time_since_disturbance + config.control_dt,
    )

    tick = episode.time_since_disturbance >= config.disturbance_period - 1e-9
    impulse = np.zeros((n, 3))
    if np.any(tick):
        impulse[tick] = sample_velocity_disturbance(config, rng, int(tick.sum()))
        episode.time_since_disturbance[tick] = 0.0
    state_prev = state
    state = apply_velocity_impulse(state, impulse)
    state = replace(state,
                    previous_joint_velocities=state_prev.joint_velocities.copy(),
                    previous_base_angular_velocity=state_prev.base_angular_velocity.copy())

    diverged = np.zeros(n, dtype=bool)
    reports = []
    torques = np.zeros((n, N_JOINTS))
    for substep in range(config.sim_substeps):
        torques = pd_torques(model, state, cmd)
        last = substep == config.sim_substeps - 1
        try:
            new_state, report = step(model, state, torques, terrain, config.sim_dt,
                                     external_force=episode.external_force,
                                     external_torque=episode.external_torque,
                                     base_mass_delta=episode.base_mass_delta,
                                     with_self_collisions=last)
        except DivergedStateError as e:
            rows = np.asarray(e.rows)
            logger.warning(f"Rows {rows.tolist()} diverged at {e.body}; terminating those episodes")
            diverged[rows] = True
            new_state = e.state.with_rows(rows, state.rows(rows))
            report = e.contact.with_rows(rows, _idle_contact(state.rows(rows)))
            report = replace(report,
                             normal_force=np.nan_to_num(report.normal_force),
                             tangential_force=np.nan_to_num(report.tangential_force),
                             foot_velocity=np.nan_to_num(report.foot_velocity),
                             touchdown_speed=np.nan_to_num(report.touchdown_speed))
        state = new_state
        reports.append(report)

    _, foot_velocity = foot_kinematics(model, state)
    contact = _aggregate_contacts(reports, foot_velocity)
    rewards = compute_rewards(config, episode.quiet_phase, model, state, state_prev, contact, episode, torques)
    if np.any(diverged):
        rewards = rewards.with_rows(np.flatnonzero(diverged),
                                    RewardBreakdown(**{t: np.zeros(int(diverged.sum())) for t in REWARD_TERMS}))

    episode = replace(episode,
                      elapsed=episode.elapsed + config.control_dt,
                      tracking_score=episode.tracking_score + rewards.tracking / config.episode_length)

    roll, pitch = base_roll_pitch(state)
    fallen = (np.abs(roll) > config.fall_angle) | (np.abs(pitch) > config.fall_angle)
    trunk = trunk_ground_contact(model, state, terrain)
    timeout = episode.elapsed >= config.episode_length - 1e-9
    reason = np.full(n, "", dtype=object)
    reason[timeout] = "timeout"
    reason[trunk] = "trunk_contact"
    reason[fallen] = "fall"
    reason[diverged] = "diverged"
    done = reason != ""

    observation = observe(config, state, contact, episode, rng)
    info = {
        "time_outs": timeout & ~fallen & ~trunk & ~diverged,
        "contact": contact,
        "torques": torques,
        "joint_acceleration": (state.joint_velocities - state_prev.joint_velocities) / config.control_dt,
        "base_ang_acceleration": ((state.base_angular_velocity - state_prev.base_angular_velocity)
                                  / config.control_dt)[:, :2],
        "gain_scale": expit(cmd.gain_inputs),
        "foot_speed": np.linalg.norm(foot_velocity, axis=-1),
        "base_velocity": base_velocity_in_body(state),
    }
    return EnvStep(state, episode, observation, rewards, done, reason, info)


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------

class CurriculumLatch:
    def __init__(self, threshold: float = 1.5, window: int = 100, enabled: bool = True,
                 initial_phase: Phase = Phase.NOISY):
        """
        One-way noisy -> quiet switch driven by episodic tracking scores.

        Args:
            threshold (float): Running-mean score that must be exceeded to flip
            window (int): Number of most recent completed episodes in the mean
            enabled (bool): When False the phase stays at initial_phase forever
            initial_phase (Phase): Phase before any flip
        """
        self.threshold = threshold
        self.enabled = enabled
        self.phase = Phase(initial_phase)
        self.scores = deque(maxlen=window)
        self.flip_count = 0

    @classmethod
    def from_config(cls, config: EnvConfig) -> "CurriculumLatch":
        return cls(config.curriculum_threshold, config.curriculum_window,
                   config.curriculum_enabled, config.initial_phase)

    @property
    def running_mean(self) -> Optional[float]:
        return float(np.mean(self.scores)) if self.scores else None

    def update(self, completed_episode_scores: Iterable[float]) -> Phase:
        self.scores.extend(float(s) for s in completed_episode_scores)
        if (self.enabled and self.phase is Phase.NOISY and self.scores
                and self.running_mean > self.threshold):
            self.phase = Phase.QUIET
            self.flip_count += 1
            logger.info(f"Curriculum switched to quiet walking (running mean {self.running_mean:.3f})")
        return self.phase

    def state_dict(self) -> Dict[str, Any]:
        return {"phase": self.phase.value, "scores": list(self.scores), "flip_count": self.flip_count}


def curriculum_update(latch: CurriculumLatch, completed_episode_scores: Iterable[float]) -> Phase:
    return latch.update(completed_episode_scores)


# ---------------------------------------------------------------------------
# Vectorized environment with auto-reset
# ---------------------------------------------------------------------------

class QuietWalkEnv:
    def __init__(self, config: EnvConfig, model: RobotModel, n_envs: int, seed: int,
                 latch: Optional[CurriculumLatch] = None):
        """
        Initialize N environments that reset themselves when an episode ends.

        Args:
            config (EnvConfig): Environment configuration
            model (RobotModel): Robot description
            n_envs (int): Number of parallel robots
            seed (int): Seed of the single generator driving every random draw
            latch (Optional[CurriculumLatch]): Shared curriculum latch
        """
        self.config = config
        self.model = model
        self.n_envs = n_envs
        self.rng = np.random.default_rng(seed)
        self.latch = latch or CurriculumLatch.from_config(config)
        self.completed_scores: List[float] = []
        self.completed_lengths: List[float] = []
        self.reset()

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def action_dim(self) -> int:
        return ACTION_DIM

    def reset(self) -> np.ndarray:
        self.state, self.episode, self.observation, self.terrain = reset(
            self.config, self.model, self.rng, self.n_envs, self.latch.phase)
        return self.observation.vector

    def sync_phase(self) -> None:
        """Put every row in the latch's current phase."""
        self.episode.quiet_phase[:] = self.latch.phase is Phase.QUIET

    def pop_completed(self) -> Tuple[List[float], List[float]]:
        scores, lengths = self.completed_scores, self.completed_lengths
        self.completed_scores, self.completed_lengths = [], []
        return scores, lengths

    def step(self, actions: np.ndarray) -> Tuple[np.ndarray, RewardBreakdown, np.ndarray, Dict[str, Any]]:
        """
        Step all environments and reset the ones that finished.

        Returns:
            Tuple: next observations (N, obs_dim), reward breakdown, done flags and info;
            info["terminal_observation"] holds the pre-reset observation of finished rows
        """
        result = step_env(self.config, self.model, self.terrain, self.state, self.episode, actions, self.rng)
        self.state, self.episode = result.state, result.episode
        observation = result.observation.vector
        info = dict(result.info)
        info["reason"] = result.reason
        info["terminal_observation"] = observation.copy()

        done_rows = np.flatnonzero(result.done)
        if done_rows.size:
            self.completed_scores.extend(self.episode.tracking_score[done_rows].tolist())
            self.completed_lengths.extend(self.episode.elapsed[done_rows].tolist())
            state, episode, fresh, terrain = reset(self.config, self.model, self.rng, done_rows.size, self.latch.phase)
            self.state = self.state.with_rows(done_rows, state)
            self.episode = self.episode.with_rows(done_rows, episode)
            self.terrain = self.terrain.with_rows(done_rows, terrain)
            observation = observation.copy()
            observation[done_rows] = fresh.vector
        self.observation = Observation(vector=observation)
        return observation, result.rewards, result.done, info
