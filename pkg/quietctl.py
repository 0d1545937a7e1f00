"""
Command-line experiment harness for quiet-walking policies.

Subcommands: train, eval, sweep-slope, sweep-dr, sweep-velocity, trace-gains,
analyze-wav and validate-config. Every CSV written here starts with a
provenance comment line (seed, git describe, config hash) and a header row.
"""
import copy
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, ClassVar, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import click
import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from acoustics import (
    AUDIBLE_BAND,
    AcousticsError,
    PenaltyMetrics,
    TrajectoryRecord,
    band_power,
    band_power_db,
    combine_metrics,
    impact_proxy_signal,
    peak_frequency,
    power_to_db,
    read_wav,
    reference_tone,
    relative_to_reference_db,
    sim_penalty_metrics,
    spectrum_rows,
    welch_psd,
)
from ppolearn import (
    CheckpointError,
    CheckpointIncompatibleError,
    NonFiniteLossError,
    OnPolicyRunner,
    PolicyParams,
    PpoConfig,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from quietenv import (
    NOISY_WALKING_TERMS,
    REWARD_TERMS,
    ConfigError,
    EnvConfig,
    Observation,
    Phase,
    QuietWalkEnv,
    reset,
    step_env,
)
from rigidsim import LEG_NAMES, RobotModel
from run_store import RunStore
from settings import SettingsError, configure_logging, worker_count

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

EVAL_COMMAND = (0.2, 0.0, 0.0)
EVAL_DURATION = 20.0
METRICS_DURATION = 10.0
SLOPE_SUCCESS_DISTANCE = 0.5
FALL_REASONS = ("fall", "trunk_contact", "diverged")
FORE_RIGHT = LEG_NAMES.index("FR")

Variant = Literal[
    "proposed", "baseline", "no-curriculum-noisy", "no-curriculum-quiet",
    "no-contact-sensor", "fixed-pd", "more-dr-friction", "more-dr-height",
]

_NOISY_WALKING_OFF = {term: 0.0 for term in NOISY_WALKING_TERMS}

# Absolute env-config values each variant sets on top of the experiment file.
VARIANT_DELTAS: Dict[str, Dict[str, Any]] = {
    "proposed": {},
    "baseline": {
        "learn_gains": False,
        "fixed_gain_input": 0.0,
        "curriculum_enabled": False,
        "initial_phase": "noisy",
        "rewards": {"noisy": _NOISY_WALKING_OFF, "quiet": _NOISY_WALKING_OFF},
    },
    "no-curriculum-noisy": {"curriculum_enabled": False, "initial_phase": "noisy"},
    "no-curriculum-quiet": {"curriculum_enabled": False, "initial_phase": "quiet"},
    "no-contact-sensor": {"observe_contacts": False},
    "fixed-pd": {"learn_gains": False, "fixed_gain_input": 0.0},
    "more-dr-friction": {"randomization": {"friction": [0.2, 0.9]}},
    "more-dr-height": {"randomization": {"terrain_height": [0.002, 0.03]}},
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class ExperimentSpec(BaseModel):
    """One experiment: env, PPO and robot configuration plus run bookkeeping."""
    model_config = ConfigDict(extra="forbid")

    name: str = "quietwalk"
    variant: Variant = "proposed"
    seed: int = Field(0, ge=0)
    n_envs: int = Field(256, ge=1)
    n_iterations: int = Field(3000, ge=1)
    checkpoint_every: int = Field(100, ge=1, description="Iterations between periodic checkpoints")
    out_dir: str = "runs/quietwalk"
    env: EnvConfig = Field(default_factory=EnvConfig)
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    robot: RobotModel = Field(default_factory=RobotModel)
    robot_file: Optional[str] = Field(None, description="Robot model JSON, relative to the config file")

    def resolved_document(self) -> Dict[str, Any]:
        """Fully resolved configuration echo; hashed into every output's provenance line."""
        document = self.model_dump(mode="json")
        document["robot_file"] = None
        return document


def deep_merge(base: Dict[str, Any], delta: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in delta.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_experiment(document: Any, overrides: Optional[Dict[str, Any]] = None,
                       base_dir: Optional[Path] = None) -> ExperimentSpec:
    """
    Validate an experiment document after CLI overrides and variant deltas.

    Args:
        document (Any): Parsed JSON document; {} gives the full default experiment
        overrides (Optional[Dict[str, Any]]): Top-level values from CLI flags; None entries are ignored
        base_dir (Optional[Path]): Directory that relative robot_file paths are resolved against

    Returns:
        ExperimentSpec: The resolved experiment

    Raises:
        ConfigError: Schema violation, carrying the JSON path of the offending value
    """
    if not isinstance(document, dict):
        raise ConfigError("experiment config must be a JSON object", "$")
    document = copy.deepcopy(document)
    for key, value in (overrides or {}).items():
        if value is not None:
            document[key] = value

    robot_file = document.get("robot_file")
    if robot_file is not None:
        if "robot" in document:
            raise ConfigError("give either robot or robot_file, not both", "$.robot_file")
        path = Path(robot_file)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            document["robot"] = orjson.loads(path.read_bytes())
        except OSError as e:
            raise ConfigError(f"cannot read robot file: {e}", "$.robot_file") from e
        except orjson.JSONDecodeError as e:
            raise ConfigError(f"robot file is not valid JSON: {e}", "$.robot_file") from e

    variant = document.get("variant", "proposed")
    if variant not in VARIANT_DELTAS:
        raise ConfigError(f"unknown variant '{variant}' (choose from {', '.join(VARIANT_DELTAS)})", "$.variant")
    env = document.get("env", {})
    if isinstance(env, dict):
        document["env"] = deep_merge(env, VARIANT_DELTAS[variant])

    try:
        return ExperimentSpec.model_validate(document)
    except ValidationError as e:
        raise ConfigError.from_validation(e, "$") from e


def load_experiment_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> ExperimentSpec:
    """Read an experiment config file (an empty file means all defaults) and resolve it."""
    if path is None:
        return resolve_experiment({}, overrides)
    config_path = Path(path)
    try:
        text = config_path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}", "$") from e
    try:
        document = orjson.loads(text) if text.strip() else {}
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e}", "$") from e
    return resolve_experiment(document, overrides, config_path.parent)


class MetricsRow(BaseModel):
    """One training iteration; the CSV columns are fixed by header()."""
    model_config = ConfigDict(extra="forbid")

    iteration: int
    phase: str
    tracking_score: Optional[float] = None
    episodes: int = 0
    episode_length: Optional[float] = None
    touchdown_speed: Optional[float] = None
    mean_reward: float
    rewards: Dict[str, Optional[float]] = Field(default_factory=dict)
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float
    lr: float

    LEADING_COLUMNS: ClassVar[Tuple[str, ...]] = ("iteration", "phase", "tracking_score", "episodes", "episode_length", "touchdown_speed", "mean_reward")
    TRAILING_COLUMNS: ClassVar[Tuple[str, ...]] = ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction", "grad_norm", "lr")

    @classmethod
    def header(cls) -> List[str]:
        return [*cls.LEADING_COLUMNS, *(f"reward_{term}" for term in REWARD_TERMS), *cls.TRAILING_COLUMNS]

    @classmethod
    def from_runner_row(cls, row: Dict[str, Any]) -> "MetricsRow":
        rewards = {term: row.get(f"reward_{term}") for term in REWARD_TERMS}
        fields_ = {key: row.get(key) for key in (*cls.LEADING_COLUMNS, *cls.TRAILING_COLUMNS)}
        return cls(rewards=rewards, **fields_)

    def csv_row(self) -> Dict[str, Any]:
        row = {key: getattr(self, key) for key in (*self.LEADING_COLUMNS, *self.TRAILING_COLUMNS)}
        row.update({f"reward_{term}": value for term, value in self.rewards.items()})
        return row


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def run_training(spec: ExperimentSpec, out_dir: str, show_progress: bool = True) -> Dict[str, Any]:
    """
    Train one experiment into `out_dir`.

    Writes config.json, metrics.csv (one row per iteration), periodic and
    final checkpoints and train_summary.json. A non-finite PPO loss keeps the
    parameters from before the failed update in a checkpoint and re-raises.
    """
    document = spec.resolved_document()
    store = RunStore(out_dir, spec.seed, document)
    store.write_json("config.json", document)
    env = QuietWalkEnv(spec.env, spec.robot, spec.n_envs, spec.seed)
    runner = OnPolicyRunner(env, spec.ppo, spec.seed)
    logger.info(f"Training '{spec.name}' ({spec.variant}) with {spec.n_envs} envs for {spec.n_iterations} iterations")

    def write_checkpoint(iteration: Optional[int]) -> Path:
        path = store.checkpoint_path(iteration)
        path.write_bytes(save_checkpoint(runner.params, document, runner.iteration, env.latch.phase.value))
        return path

    with store.open_csv("metrics.csv", MetricsRow.header()) as metrics:
        def on_iteration(row: Dict[str, Any], _runner: OnPolicyRunner) -> None:
            metrics.append(MetricsRow.from_runner_row(row).csv_row())
            if runner.iteration % spec.checkpoint_every == 0:
                write_checkpoint(runner.iteration)

        try:
            runner.learn(spec.n_iterations, on_iteration=on_iteration, show_progress=show_progress)
        except NonFiniteLossError as e:
            path = write_checkpoint(runner.iteration)
            logger.error(f"Training diverged at iteration {runner.iteration}; last good weights in {path}: "
                         f"{e.diagnostics}", exc_info=True)
            raise

    final = write_checkpoint(None)
    summary = {
        "name": spec.name,
        "variant": spec.variant,
        "iterations": runner.iteration,
        "final_phase": env.latch.phase.value,
        "flip_iteration": runner.flip_iteration,
        "running_tracking_score": env.latch.running_mean,
        "checkpoint": final.name,
    }
    store.write_json("train_summary.json", summary)
    logger.info(f"Training finished: phase={summary['final_phase']} flip_iteration={summary['flip_iteration']}")
    return summary


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EpisodeOutcome:
    reason: str
    duration: float
    progress: float           # m travelled along the ramp (or ground) x axis
    forward_velocity: float   # mean body-frame v_x
    lin_tracking_error: float
    ang_tracking_error: float
    records: List[TrajectoryRecord] = field(default_factory=list)

    @property
    def fell(self) -> bool:
        return self.reason in FALL_REASONS

    @property
    def touchdown_speeds(self) -> List[float]:
        return [speed for record in self.records for speed in record.touchdown_speeds]


@dataclass
class EvalSummary:
    command: Tuple[float, float, float]
    outcomes: List[EpisodeOutcome]
    metrics: Optional[PenaltyMetrics]
    proxy_band_db: Optional[float]

    @property
    def falls(self) -> int:
        return sum(outcome.fell for outcome in self.outcomes)

    @property
    def touchdown_speed(self) -> Optional[float]:
        speeds = [s for outcome in self.outcomes for s in outcome.touchdown_speeds]
        return float(np.mean(speeds)) if speeds else None

    def mean_of(self, attribute: str) -> float:
        return float(np.mean([getattr(outcome, attribute) for outcome in self.outcomes]))

    def metric_rows(self) -> List[Tuple[str, Optional[float], str]]:
        if self.metrics is not None:
            rows = self.metrics.rows()
        else:
            rows = [("contact_velocity", None, "m/s"), ("joint_acceleration", None, "rad/s^2"),
                    ("base_ang_acceleration", None, "rad/s^2"), ("duration", None, "s"),
                    ("touchdown_count", None, "count")]
        return rows + [
            ("impact_proxy_band_power", self.proxy_band_db, "dB"),
            ("falls", self.falls, "count"),
            ("episodes", len(self.outcomes), "count"),
            ("lin_tracking_error", self.mean_of("lin_tracking_error"), "m/s"),
            ("ang_tracking_error", self.mean_of("ang_tracking_error"), "rad/s"),
            ("forward_velocity", self.mean_of("forward_velocity"), "m/s"),
        ]


def evaluation_config(env: EnvConfig, command: Sequence[float] = EVAL_COMMAND, duration: float = EVAL_DURATION,
                      terrain_mode: Optional[str] = None, slope_angle: float = 0.0) -> EnvConfig:
    """Training config pinned to one command, forward heading and a fixed episode length."""
    vx, vy, wz = (float(c) for c in command)
    document = env.model_dump(mode="json")
    document.update({
        "commands": {"lin_vel_x": [vx, vx], "lin_vel_y": [vy, vy], "ang_vel_z": [wz, wz]},
        "randomize_initial_yaw": False,
        "episode_length": duration,
    })
    if terrain_mode is not None:
        document["terrain_mode"] = terrain_mode
        document["slope_angle"] = slope_angle
    try:
        return EnvConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError.from_validation(e, "$.env") from e


def proxy_band_db(outcomes: Sequence[EpisodeOutcome], total_mass: float, control_dt: float,
                  window_seconds: float = METRICS_DURATION) -> Optional[float]:
    """Audible-band power of the touchdown impulse proxy, averaged over episodes before conversion to dB."""
    powers = []
    for outcome in outcomes:
        steps = int(round(window_seconds / control_dt))
        records = outcome.records[:steps]
        if not records:
            continue
        clip = impact_proxy_signal(records, total_mass=total_mass, duration=records[-1].time)
        try:
            powers.append(band_power(welch_psd(clip)))
        except AcousticsError:
            logger.debug(f"Episode too short for a proxy spectrum ({clip.duration:.3f} s)")
    return float(power_to_db(np.mean(powers))) if powers else None


def evaluate_policy(env_config: EnvConfig, robot: RobotModel, params: PolicyParams, n_episodes: int, seed: int,
                    command: Sequence[float] = EVAL_COMMAND, duration: float = EVAL_DURATION,
                    terrain_mode: Optional[str] = None, slope_angle: float = 0.0) -> EvalSummary:
    """
    Roll out the mean action of a policy for n_episodes robots in parallel.

    Args:
        env_config (EnvConfig): Configuration the policy was trained with
        robot (RobotModel): Robot description
        params (PolicyParams): Policy weights
        n_episodes (int): Number of robots, one episode each
        seed (int): Seed of the evaluation generator
        command (Sequence[float]): Fixed (v_x, v_y, w_z) command
        duration (float): Episode length in s
        terrain_mode (Optional[str]): Override of the terrain mode (flat, ramp, heightfield)
        slope_angle (float): Ramp angle in rad when terrain_mode is ramp

    Returns:
        EvalSummary: per-episode outcomes with trajectory records and the penalty metrics
        over the first 10 s of every episode that lasted that long
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be at least 1, got {n_episodes}")
    config = evaluation_config(env_config, command, duration, terrain_mode, slope_angle)
    rng = np.random.default_rng(seed)
    target = np.asarray(command, dtype=float)
    state, episode, observation, terrain = reset(config, robot, rng, n_episodes, Phase.QUIET)
    start_x = state.base_position[:, 0].copy()
    along_ramp = 1.0 / np.cos(slope_angle) if config.terrain_mode == "ramp" else 1.0

    active = np.arange(n_episodes)
    records: List[List[TrajectoryRecord]] = [[] for _ in range(n_episodes)]
    reasons = ["timeout"] * n_episodes
    lin_error = np.zeros(n_episodes)
    ang_error = np.zeros(n_episodes)
    forward_velocity = np.zeros(n_episodes)
    progress = np.zeros(n_episodes)
    steps = np.zeros(n_episodes)

    for _ in range(config.max_episode_steps):
        if active.size == 0:
            break
        mean, _ = forward(params, observation.vector)
        result = step_env(config, robot, terrain, state, episode, mean, rng)
        info = result.info
        contact = info["contact"]
        for local, row in enumerate(active):
            records[row].append(TrajectoryRecord(
                time=float(result.episode.elapsed[local]),
                touchdown_speeds=tuple(contact.touchdown_speed[local][contact.touchdown[local]].tolist()),
                joint_acceleration=info["joint_acceleration"][local].copy(),
                base_ang_acceleration=info["base_ang_acceleration"][local].copy(),
                contacts=contact.in_contact[local].copy(),
                foot_speed=info["foot_speed"][local].copy(),
                gain_scale=info["gain_scale"][local].copy(),
            ))
        velocity = info["base_velocity"]
        lin_error[active] += np.linalg.norm(velocity[:, :2] - target[:2], axis=1)
        ang_error[active] += np.abs(result.state.base_angular_velocity[:, 2] - target[2])
        forward_velocity[active] += velocity[:, 0]
        progress[active] = (result.state.base_position[:, 0] - start_x[active]) * along_ramp
        steps[active] += 1

        for local in np.flatnonzero(result.done):
            reasons[active[local]] = str(result.reason[local])
        keep = np.flatnonzero(~result.done)
        state = result.state.rows(keep)
        episode = result.episode.rows(keep)
        observation = Observation(vector=result.observation.vector[keep])
        terrain = terrain.rows(keep)
        active = active[keep]

    steps = np.maximum(steps, 1)
    outcomes = [
        EpisodeOutcome(
            reason=reasons[i],
            duration=float(records[i][-1].time) if records[i] else 0.0,
            progress=float(progress[i]),
            forward_velocity=float(forward_velocity[i] / steps[i]),
            lin_tracking_error=float(lin_error[i] / steps[i]),
            ang_tracking_error=float(ang_error[i] / steps[i]),
            records=records[i],
        )
        for i in range(n_episodes)
    ]

    parts = []
    window = min(METRICS_DURATION, duration)
    for outcome in outcomes:
        if outcome.duration >= window - 0.5 * config.control_dt:
            parts.append(sim_penalty_metrics(outcome.records, window, config.control_dt))
    metrics = combine_metrics(parts) if parts else None
    if metrics is None:
        logger.warning("No episode lasted long enough for penalty metrics")
    summary = EvalSummary(
        command=tuple(float(c) for c in command),
        outcomes=outcomes,
        metrics=metrics,
        proxy_band_db=proxy_band_db(outcomes, robot.total_mass, config.control_dt, window),
    )
    logger.info(f"Evaluated {n_episodes} episodes: falls={summary.falls} touchdown_speed={summary.touchdown_speed}")
    return summary


class PolicyEntry(NamedTuple):
    label: str
    path: str
    spec: ExperimentSpec
    params: PolicyParams


def load_policy(path: str, spec: Optional[ExperimentSpec] = None) -> PolicyEntry:
    """
    Load a checkpoint against an experiment; the checkpoint's own config echo is used when spec is None.

    Raises:
        CheckpointError: unreadable or malformed checkpoint
        CheckpointIncompatibleError: weights do not fit the experiment's network
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if spec is None:
        spec = resolve_experiment(load_checkpoint(raw).config)
    loaded = load_checkpoint(raw, obs_dim=spec.env.obs_dim, hidden_sizes=spec.ppo.hidden_sizes)
    logger.info(f"Loaded {path} (iteration {loaded.iteration}, phase {loaded.phase})")
    return PolicyEntry(spec.variant, str(path), spec, loaded.params)


def run_parallel(jobs: Sequence[Callable[[], Any]]) -> List[Any]:
    """Run independent jobs on a thread pool bounded by QUIETGAIT_THREADS; results keep submission order."""
    if not jobs:
        return []
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(jobs))) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [future.result() for future in futures]


def slope_success(summary: EvalSummary) -> float:
    """Share of episodes that climbed 0.5 m along the ramp without a fall termination."""
    successes = [not o.fell and o.progress >= SLOPE_SUCCESS_DISTANCE for o in summary.outcomes]
    return float(np.mean(successes))


def sweep_slope(policies: Sequence[PolicyEntry], angles_deg: Sequence[float], n_episodes: int,
                seed: int) -> List[Dict[str, Any]]:
    """One row per (policy, angle): success rate, progress and quietness on a planar ramp."""
    jobs = []
    for policy in policies:
        for angle in angles_deg:
            jobs.append(lambda p=policy, a=angle: evaluate_policy(
                p.spec.env, p.spec.robot, p.params, n_episodes, seed,
                terrain_mode="ramp", slope_angle=float(np.radians(a))))
    summaries = run_parallel(jobs)
    rows = []
    index = 0
    for policy in policies:
        for angle in angles_deg:
            summary = summaries[index]
            index += 1
            rate = slope_success(summary)
            rows.append({
                "variant": policy.label,
                "checkpoint": policy.path,
                "angle_deg": float(angle),
                "success_rate": rate,
                "success": int(rate >= 0.5),
                "mean_progress": summary.mean_of("progress"),
                "falls": summary.falls,
                "touchdown_speed": summary.touchdown_speed,
                "proxy_band_db": summary.proxy_band_db,
            })
    return rows


def max_successful_slope(rows: Sequence[Dict[str, Any]]) -> Optional[float]:
    angles = [row["angle_deg"] for row in rows if row["success"]]
    return max(angles) if angles else None


def sweep_dr(policies: Sequence[PolicyEntry], angles_deg: Sequence[float], n_episodes: int,
             seed: int) -> List[Dict[str, Any]]:
    """Robustness/quietness trade-off: steepest climbed slope against flat-ground quietness."""
    slope_rows = sweep_slope(policies, angles_deg, n_episodes, seed)
    flat = run_parallel([
        (lambda p=policy: evaluate_policy(p.spec.env, p.spec.robot, p.params, n_episodes, seed, terrain_mode="flat"))
        for policy in policies
    ])
    rows = []
    for policy, summary in zip(policies, flat):
        own = [row for row in slope_rows if row["checkpoint"] == policy.path]
        rows.append({
            "variant": policy.label,
            "checkpoint": policy.path,
            "max_slope_deg": max_successful_slope(own),
            "flat_touchdown_speed": summary.touchdown_speed,
            "flat_proxy_band_db": summary.proxy_band_db,
            "flat_falls": summary.falls,
        })
    return rows


def sweep_velocity(policies: Sequence[PolicyEntry], speeds: Sequence[float], n_episodes: int,
                   seed: int) -> List[Dict[str, Any]]:
    """Noise proxies against measured forward velocity for several forward commands."""
    jobs = [
        (lambda p=policy, v=speed: evaluate_policy(p.spec.env, p.spec.robot, p.params, n_episodes, seed,
                                                   command=(v, 0.0, 0.0)))
        for policy in policies for speed in speeds
    ]
    summaries = iter(run_parallel(jobs))
    rows = []
    for policy in policies:
        for speed in speeds:
            summary = next(summaries)
            metrics = summary.metrics
            rows.append({
                "variant": policy.label,
                "checkpoint": policy.path,
                "command_vx": float(speed),
                "measured_vx": summary.mean_of("forward_velocity"),
                "touchdown_speed": summary.touchdown_speed,
                "proxy_band_db": summary.proxy_band_db,
                "joint_acceleration": metrics.joint_acceleration if metrics else None,
                "base_ang_acceleration": metrics.base_ang_acceleration if metrics else None,
                "falls": summary.falls,
            })
    return rows


def swing_gain_profile(records: Sequence[TrajectoryRecord], leg: int, control_dt: float,
                       window: float = 0.05) -> Optional[Dict[str, float]]:
    """
    Mean sigma(x) of one leg's joints in the `window` seconds before touchdown versus mid-swing.

    Mid-swing is the middle third of each swing interval. Returns None when the
    rollout holds no complete swing.
    """
    contacts = np.array([bool(r.contacts[leg]) for r in records])
    gains = np.array([float(np.mean(r.gain_scale[3 * leg:3 * leg + 3])) for r in records])
    lead = max(1, int(round(window / control_dt)))
    pre, mid = [], []
    swings = 0
    liftoffs = np.flatnonzero(contacts[:-1] & ~contacts[1:]) + 1
    for start in liftoffs:
        landing = np.flatnonzero(contacts[start:])
        if landing.size == 0:
            break
        end = start + landing[0]
        length = end - start
        if length < 3:
            continue
        swings += 1
        pre.extend(gains[max(start, end - lead):end])
        mid.extend(gains[start + length // 3:start + max(2 * length // 3, length // 3 + 1)])
    if not pre or not mid:
        return None
    return {"pre_touchdown_sigma": float(np.mean(pre)), "mid_swing_sigma": float(np.mean(mid)), "swings": swings}


def gain_trace(robot: RobotModel, outcome: EpisodeOutcome) -> Tuple[List[str], List[List[Any]]]:
    header = ["time", *(f"sigma_{name}" for name in robot.joint_names()),
              *(f"contact_{leg}" for leg in LEG_NAMES), "fr_foot_speed"]
    rows = [
        [record.time, *record.gain_scale.tolist(), *record.contacts.astype(int).tolist(),
         float(record.foot_speed[FORE_RIGHT])]
        for record in outcome.records
    ]
    return header, rows


def analyze_wav_file(path: Path, band: Tuple[float, float]) -> Dict[str, Any]:
    """Band power, peak frequency and level relative to the 1 kHz reference tone for one WAV file."""
    clip = read_wav(path.read_bytes())
    report = welch_psd(clip)
    reference = welch_psd(reference_tone(clip.sample_rate, duration=max(1.0, 2.0 * report.window / clip.sample_rate)))
    level = band_power_db(report, *band)
    return {
        "report": report,
        "band_power_db": level,
        "peak_hz": peak_frequency(report, *band),
        "relative_db": relative_to_reference_db(level, band_power_db(reference, *band)),
        "sample_rate": clip.sample_rate,
        "duration": clip.duration,
    }


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

USAGE_ERRORS = (ConfigError, CheckpointError, CheckpointIncompatibleError, SettingsError)


class QuietCtlGroup(click.Group):
    """Maps usage and config problems to exit 1 and runtime failures to exit 2."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            code = super().main(args=args, prog_name=prog_name, complete_var=complete_var,
                                standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = EXIT_USAGE
        except USAGE_ERRORS as e:
            click.echo(f"Error: {e}", err=True)
            code = EXIT_USAGE
        except Exception as e:
            logger.error(f"Command failed: {e}", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            code = EXIT_RUNTIME
        code = code if isinstance(code, int) else EXIT_OK
        if standalone_mode:
            sys.exit(code)
        return code


@dataclass
class CliOptions:
    config: Optional[str]
    seed: Optional[int]
    envs: Optional[int]
    iters: Optional[int]
    variant: Optional[str]
    out: Optional[str]
    checkpoint: Optional[str]

    def experiment(self) -> ExperimentSpec:
        overrides = {"seed": self.seed, "n_envs": self.envs, "n_iterations": self.iters, "variant": self.variant}
        return load_experiment_config(self.config, overrides)

    def out_dir(self, spec: Optional[ExperimentSpec] = None) -> str:
        if self.out is not None:
            return self.out
        return spec.out_dir if spec is not None else ExperimentSpec().out_dir

    def run_seed(self, spec: Optional[ExperimentSpec] = None) -> int:
        if self.seed is not None:
            return self.seed
        return spec.seed if spec is not None else 0

    def policy(self, path: Optional[str] = None) -> PolicyEntry:
        path = path or self.checkpoint
        if path is None:
            raise click.UsageError("a checkpoint is required (--checkpoint PATH)")
        spec = self.experiment() if self.config is not None else None
        return load_policy(path, spec)


def _float_list(ctx, param, value: Optional[str]) -> Optional[List[float]]:
    if value is None:
        return None
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got '{value}'")


def _store(options: CliOptions, spec: Optional[ExperimentSpec], extra: Dict[str, Any],
           seed: Optional[int] = None) -> RunStore:
    document = {"experiment": spec.resolved_document() if spec is not None else None, **extra}
    return RunStore(options.out_dir(spec), options.run_seed(spec) if seed is None else seed, document)


@click.group(cls=QuietCtlGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Experiment config JSON")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Seed recorded in every output")
@click.option("--envs", type=click.IntRange(min=1), default=None, help="Parallel environments")
@click.option("--iters", type=click.IntRange(min=1), default=None, help="Training iterations")
@click.option("--variant", type=click.Choice(list(VARIANT_DELTAS)), default=None, help="Ablation variant")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None, help="Policy checkpoint")
@click.pass_context
def cli(ctx, config_path, seed, envs, iters, variant, out, checkpoint):
    """Quiet quadruped walking lab."""
    configure_logging()
    ctx.obj = CliOptions(config_path, seed, envs, iters, variant, out, checkpoint)


@cli.command()
@click.option("--checkpoint-every", type=click.IntRange(min=1), default=None, help="Iterations between checkpoints")
@click.option("--progress/--no-progress", default=True, help="Show a progress bar")
@click.pass_obj
def train(options: CliOptions, checkpoint_every, progress):
    """Train a policy with PPO and the noisy -> quiet curriculum."""
    spec = options.experiment()
    if checkpoint_every is not None:
        spec = spec.model_copy(update={"checkpoint_every": checkpoint_every})
    out_dir = options.out_dir(spec)
    configure_logging(Path(out_dir) / "train.log")
    summary = run_training(spec, out_dir, show_progress=progress)
    click.echo(orjson.dumps(summary, option=orjson.OPT_INDENT_2).decode())
    return EXIT_OK


@cli.command(name="eval")
@click.option("--episodes", type=click.IntRange(min=1), default=10, help="Evaluation episodes")
@click.option("--duration", type=click.FloatRange(min=0.0, min_open=True), default=EVAL_DURATION, help="Episode length in s")
@click.option("--command", "command", callback=_float_list, default="0.2,0,0", help="v_x,v_y,w_z")
@click.pass_obj
def eval_command(options: CliOptions, episodes, duration, command):
    """Evaluate a checkpoint with mean actions at a fixed command."""
    if len(command) != 3:
        raise click.BadParameter("command needs three values", param_hint="--command")
    policy = options.policy()
    seed = options.run_seed(policy.spec)
    summary = evaluate_policy(policy.spec.env, policy.spec.robot, policy.params, episodes, seed,
                              command=command, duration=duration)
    store = _store(options, policy.spec, {"command": "eval", "checkpoint": policy.path, "episodes": episodes,
                                          "duration": duration, "velocity_command": list(command)})
    store.write_csv("eval_metrics.csv", ["metric", "value", "unit"], summary.metric_rows())
    store.write_csv(
        "eval_episodes.csv",
        ["episode", "reason", "duration", "progress", "forward_velocity", "lin_tracking_error",
         "ang_tracking_error", "touchdowns", "touchdown_speed"],
        [
            [i, o.reason, o.duration, o.progress, o.forward_velocity, o.lin_tracking_error, o.ang_tracking_error,
             len(o.touchdown_speeds), float(np.mean(o.touchdown_speeds)) if o.touchdown_speeds else None]
            for i, o in enumerate(summary.outcomes)
        ],
    )
    report = {name: value for name, value, _ in summary.metric_rows()}
    report["variant"] = policy.label
    store.write_json("eval_summary.json", report)
    click.echo(orjson.dumps(report, option=orjson.OPT_INDENT_2).decode())
    return EXIT_OK


def _policies(options: CliOptions, checkpoints: Sequence[str]) -> List[PolicyEntry]:
    paths = list(checkpoints) or ([options.checkpoint] if options.checkpoint else [])
    if not paths:
        raise click.UsageError("give at least one checkpoint")
    return [options.policy(path) for path in paths]


@cli.command(name="sweep-slope")
@click.argument("checkpoints", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--angles", callback=_float_list, default="0,1,2,3,4,5,6,7,8,9,10", help="Ramp angles in degrees")
@click.option("--episodes", type=click.IntRange(min=1), default=3)
@click.pass_obj
def sweep_slope_command(options: CliOptions, checkpoints, angles, episodes):
    """Slope robustness: success and quietness per (variant, angle)."""
    policies = _policies(options, checkpoints)
    seed = options.run_seed(policies[0].spec)
    rows = sweep_slope(policies, angles, episodes, seed)
    store = _store(options, None, {"command": "sweep-slope", "checkpoints": [p.path for p in policies],
                                   "angles": list(angles), "episodes": episodes}, seed)
    header = ["variant", "checkpoint", "angle_deg", "success_rate", "success", "mean_progress", "falls",
              "touchdown_speed", "proxy_band_db"]
    store.write_csv("sweep_slope.csv", header, ([row[c] for c in header] for row in rows))
    return EXIT_OK


@cli.command(name="sweep-dr")
@click.argument("checkpoints", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--angles", callback=_float_list, default="0,1,2,3,4,5,6,7,8,9,10", help="Ramp angles in degrees")
@click.option("--episodes", type=click.IntRange(min=1), default=3)
@click.pass_obj
def sweep_dr_command(options: CliOptions, checkpoints, angles, episodes):
    """Randomization-width trade-off: steepest slope against flat-ground quietness."""
    policies = _policies(options, checkpoints)
    seed = options.run_seed(policies[0].spec)
    rows = sweep_dr(policies, angles, episodes, seed)
    store = _store(options, None, {"command": "sweep-dr", "checkpoints": [p.path for p in policies],
                                   "angles": list(angles), "episodes": episodes}, seed)
    header = ["variant", "checkpoint", "max_slope_deg", "flat_touchdown_speed", "flat_proxy_band_db", "flat_falls"]
    store.write_csv("sweep_dr.csv", header, ([row[c] for c in header] for row in rows))
    return EXIT_OK


@cli.command(name="sweep-velocity")
@click.argument("checkpoints", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--speeds", callback=_float_list, default="0.1,0.15,0.2,0.25,0.3", help="Forward commands in m/s")
@click.option("--episodes", type=click.IntRange(min=1), default=3)
@click.pass_obj
def sweep_velocity_command(options: CliOptions, checkpoints, speeds, episodes):
    """Noise proxies against measured forward velocity."""
    policies = _policies(options, checkpoints)
    seed = options.run_seed(policies[0].spec)
    rows = sweep_velocity(policies, speeds, episodes, seed)
    store = _store(options, None, {"command": "sweep-velocity", "checkpoints": [p.path for p in policies],
                                   "speeds": list(speeds), "episodes": episodes}, seed)
    header = ["variant", "checkpoint", "command_vx", "measured_vx", "touchdown_speed", "proxy_band_db",
              "joint_acceleration", "base_ang_acceleration", "falls"]
    store.write_csv("sweep_velocity.csv", header, ([row[c] for c in header] for row in rows))
    return EXIT_OK


@cli.command(name="trace-gains")
@click.option("--duration", type=click.FloatRange(min=0.0, min_open=True), default=5.0, help="Rollout length in s")
@click.option("--rollouts", type=click.IntRange(min=1), default=1, help="Rollouts in the swing summary")
@click.pass_obj
def trace_gains_command(options: CliOptions, duration, rollouts):
    """Applied gain scales, contact flags and fore-right foot speed at control rate."""
    policy = options.policy()
    seed = options.run_seed(policy.spec)
    summary = evaluate_policy(policy.spec.env, policy.spec.robot, policy.params, rollouts, seed, duration=duration)
    store = _store(options, policy.spec, {"command": "trace-gains", "checkpoint": policy.path,
                                          "duration": duration, "rollouts": rollouts})
    header, rows = gain_trace(policy.spec.robot, summary.outcomes[0])
    store.write_csv("gain_trace.csv", header, rows)

    profiles = [swing_gain_profile(o.records, FORE_RIGHT, policy.spec.env.control_dt) for o in summary.outcomes]
    profiles = [p for p in profiles if p is not None]
    report = {
        "variant": policy.label,
        "rollouts": rollouts,
        "profiled_rollouts": len(profiles),
        "pre_touchdown_sigma": float(np.median([p["pre_touchdown_sigma"] for p in profiles])) if profiles else None,
        "mid_swing_sigma": float(np.median([p["mid_swing_sigma"] for p in profiles])) if profiles else None,
    }
    store.write_json("gain_trace_summary.json", report)
    click.echo(orjson.dumps(report, option=orjson.OPT_INDENT_2).decode())
    return EXIT_OK


@cli.command(name="analyze-wav")
@click.argument("paths", nargs=-1, required=True)
@click.option("--band", callback=_float_list, default=f"{AUDIBLE_BAND[0]:g},{AUDIBLE_BAND[1]:g}", help="f_lo,f_hi in Hz")
@click.option("--psd-out/--no-psd-out", default=False, help="Also write psd_<file>.csv per input")
@click.pass_obj
def analyze_wav_command(options: CliOptions, paths, band, psd_out):
    """Welch band power and peak frequency of WAV recordings."""
    if len(band) != 2 or band[0] >= band[1]:
        raise click.BadParameter("band needs f_lo < f_hi", param_hint="--band")
    store = _store(options, None, {"command": "analyze-wav", "files": list(paths), "band": list(band)})
    rows = []
    failed = 0
    for name in paths:
        path = Path(name)
        try:
            result = analyze_wav_file(path, (band[0], band[1]))
        except (OSError, AcousticsError) as e:
            logger.warning(f"Could not analyze {path}: {e}")
            rows.append([str(path), "error", None, None, None, None, str(e)])
            failed += 1
            continue
        rows.append([str(path), "ok", result["band_power_db"], result["peak_hz"], result["relative_db"],
                     result["sample_rate"], ""])
        if psd_out:
            store.write_csv(f"psd_{path.stem}.csv", ["freq_hz", "psd"], spectrum_rows(result["report"]))
    store.write_csv("wav_analysis.csv",
                    ["file", "status", "band_power_db", "peak_hz", "relative_to_reference_db", "sample_rate", "error"],
                    rows)
    if failed:
        click.echo(f"{failed} of {len(paths)} files failed", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


@cli.command(name="validate-config")
@click.argument("path", required=False, type=click.Path(dir_okay=False))
@click.option("--schema", is_flag=True, help="Print the JSON schema instead")
@click.pass_obj
def validate_config_command(options: CliOptions, path, schema):
    """Print the fully resolved configuration (defaults applied, variant deltas merged)."""
    if schema:
        click.echo(orjson.dumps(ExperimentSpec.model_json_schema(), option=orjson.OPT_INDENT_2).decode())
        return EXIT_OK
    if path is not None:
        options.config = path
    spec = options.experiment()
    click.echo(orjson.dumps(spec.resolved_document(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode())
    return EXIT_OK


if __name__ == "__main__":
    cli()
