from dataclasses import replace
from pathlib import Path

import numpy as np
import orjson
import pytest
from scipy.spatial.transform import Rotation
from scipy.special import expit

from rigidsim import (
    GRAVITY,
    N_DOF,
    N_JOINTS,
    ActuatorCommand,
    DivergedStateError,
    InvalidInputError,
    RobotModel,
    SimState,
    Terrain,
    apply_velocity_impulse,
    base_roll_pitch,
    foot_kinematics,
    gravity_orientation,
    load_robot_model,
    mechanical_energy,
    pd_gains,
    pd_torques,
    self_collision_count,
    step,
    trunk_ground_contact,
)

DT = 1.0 / 400.0
MODEL = RobotModel()


def lifted(n: int = 1, height: float = 10.0) -> SimState:
    state = SimState.standing(MODEL, n)
    state.base_position[:, 2] = height
    return state


def command(targets: np.ndarray, gains: np.ndarray) -> ActuatorCommand:
    return ActuatorCommand(target_joint_positions=np.atleast_2d(targets), gain_inputs=np.atleast_2d(gains))


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Actuator
# ---------------------------------------------------------------------------

def test_pd_torques_zero_error_zero_velocity():
    state = SimState.standing(MODEL)
    torques = pd_torques(MODEL, state, command(state.joint_positions, np.zeros((1, N_JOINTS))))
    assert np.array_equal(torques, np.zeros((1, N_JOINTS)))


def test_pd_torques_midpoint_gain():
    state = SimState.standing(MODEL)
    torques = pd_torques(MODEL, state, command(state.joint_positions + 0.1, np.zeros((1, N_JOINTS))))
    assert np.allclose(torques, 0.5, atol=1e-12)


def test_pd_torques_saturated_gain():
    state = SimState.standing(MODEL)
    state.joint_velocities[:] = 1.0
    torques = pd_torques(MODEL, state, command(state.joint_positions + 0.1, np.full((1, N_JOINTS), 20.0)))
    assert np.allclose(torques, 0.65, atol=1e-6)


def test_pd_torques_clamped_to_limit():
    state = SimState.standing(MODEL)
    torques = pd_torques(MODEL, state, command(state.joint_positions + 5.0, np.full((1, N_JOINTS), 20.0)))
    assert np.allclose(torques, MODEL.arrays.torque_limits)


def test_pd_torques_rejects_non_finite():
    state = SimState.standing(MODEL)
    gains = np.zeros((1, N_JOINTS))
    gains[0, 3] = np.nan
    with pytest.raises(InvalidInputError):
        pd_torques(MODEL, state, command(state.joint_positions, gains))


def test_gains_follow_sigmoid_law():
    rng = np.random.default_rng(7)
    x = rng.normal(scale=5.0, size=(1000, N_JOINTS))
    p_gain, d_gain = pd_gains(x)
    sigma = 1.0 / (1.0 + np.exp(-x))
    assert np.max(np.abs(p_gain - (3.0 + 4.0 * sigma))) < 1e-12
    assert np.max(np.abs(d_gain - (0.03 + 0.02 * sigma))) < 1e-12


def test_applied_torque_matches_gain_law():
    rng = np.random.default_rng(8)
    n = 64
    state = SimState.standing(MODEL, n)
    state.joint_velocities[:] = rng.uniform(-2.0, 2.0, size=(n, N_JOINTS))
    targets = state.joint_positions + rng.uniform(-0.05, 0.05, size=(n, N_JOINTS))
    x = rng.normal(scale=3.0, size=(n, N_JOINTS))
    torques = pd_torques(MODEL, state, command(targets, x))
    sigma = expit(x)
    expected = ((3.0 + 4.0 * sigma) * (targets - state.joint_positions)
                - (0.03 + 0.02 * sigma) * state.joint_velocities)
    expected = np.clip(expected, -MODEL.arrays.torque_limits, MODEL.arrays.torque_limits)
    assert np.max(np.abs(torques - expected)) < 1e-12


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def test_free_fall_single_step():
    state, report = step(MODEL, lifted(), np.zeros((1, N_JOINTS)), Terrain.flat(), DT)
    assert state.base_linear_velocity[0, 2] == pytest.approx(-GRAVITY * DT, abs=1e-9)
    assert np.allclose(state.joint_velocities, 0.0, atol=1e-9)
    assert not report.in_contact.any()


def test_ballistic_trajectory_one_second():
    state = lifted()
    v0 = np.array([0.3, -0.2, 1.0])
    state.base_linear_velocity[0] = v0
    x0 = state.base_position[0].copy()
    terrain = Terrain.flat()
    torques = np.zeros((1, N_JOINTS))
    steps = 400
    for _ in range(steps):
        state, _ = step(MODEL, state, torques, terrain, DT)
    t = steps * DT
    expected = x0 + v0 * t
    expected[2] -= 0.5 * GRAVITY * t ** 2
    assert np.max(np.abs(state.base_position[0] - expected)) < 1e-6
    assert state.base_linear_velocity[0, 2] == pytest.approx(v0[2] - GRAVITY * t, abs=1e-9)


def test_quaternion_stays_normalized():
    state = lifted(3)
    state.base_angular_velocity[:] = [[3.0, -2.0, 5.0], [0.0, 7.0, 0.0], [1.0, 1.0, 1.0]]
    terrain = Terrain.flat(3)
    for _ in range(200):
        state, _ = step(MODEL, state, np.zeros((3, N_JOINTS)), terrain, DT)
        assert np.all(np.abs(np.linalg.norm(state.base_orientation, axis=1) - 1.0) < 1e-9)


def test_invalid_step_size():
    with pytest.raises(InvalidInputError):
        step(MODEL, lifted(), np.zeros((1, N_JOINTS)), Terrain.flat(), 0.0)


def test_divergence_names_body_and_row():
    state = lifted(2)
    state.base_linear_velocity[1, 0] = np.nan
    with pytest.raises(DivergedStateError) as info:
        step(MODEL, state, np.zeros((2, N_JOINTS)), Terrain.flat(2), DT)
    assert info.value.rows == [1]
    assert info.value.body == "base"


def hold_default(state: SimState) -> np.ndarray:
    return pd_torques(MODEL, state, command(np.tile(MODEL.arrays.default_pose, (state.batch_size, 1)),
                                            np.zeros((state.batch_size, N_JOINTS))))


@pytest.mark.slow
def test_static_stance_settles():
    state = SimState.standing(MODEL)
    terrain = Terrain.flat()
    heights = []
    contact_sets = []
    for _ in range(6 * 400):
        state, report = step(MODEL, state, hold_default(state), terrain, DT)
        heights.append(state.base_position[0, 2])
        contact_sets.append(report.in_contact[0].copy())
        feet, _ = foot_kinematics(MODEL, state)
        assert np.all(feet[0, :, 2] - MODEL.foot_radius >= -0.002)
        assert np.all(report.tangential_force <= terrain.friction[:, None] * report.normal_force + 1e-12)
    settled = heights[-1]
    assert abs(heights[399] - settled) <= 0.002
    # five full seconds after settling with all four feet down
    assert len(contact_sets[400:]) >= 5 * 400
    assert all(flags.all() for flags in contact_sets[399:])
    assert max(heights[400:]) - min(heights[400:]) <= 0.002


@pytest.mark.slow
def test_pendulum_energy_matches_fine_reference():
    locked = np.ones(N_DOF, dtype=bool)
    locked[6] = False

    def run(dt: float, seconds: float):
        state = lifted(height=1.0)
        state.joint_positions[0, 0] += 0.5
        energies, kinetic = [], []
        for _ in range(int(round(seconds / dt))):
            state, _ = step(MODEL, state, np.zeros((1, N_JOINTS)), Terrain.flat(), dt, locked=locked)
            total = mechanical_energy(MODEL, state)[0]
            at_rest = replace(state, joint_velocities=np.zeros_like(state.joint_velocities))
            energies.append(total)
            kinetic.append(total - mechanical_energy(MODEL, at_rest)[0])
        return np.array(energies), max(kinetic)

    coarse, _ = run(DT, 10.0)
    fine, peak_kinetic = run(DT / 10.0, 10.0)

    assert peak_kinetic > 0.0
    assert abs(coarse.mean() - fine.mean()) < 0.01 * peak_kinetic
    assert abs(coarse[-800:].mean() - fine[-8000:].mean()) < 0.01 * peak_kinetic


def test_contact_cone_never_violated():
    rng = np.random.default_rng(3)
    n = 8
    state = SimState.standing(MODEL, n)
    state.base_position[:, 2] -= 0.004
    state.base_linear_velocity[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2))
    terrain = Terrain.flat(n, friction=rng.uniform(0.2, 0.9, size=n))
    for _ in range(100):
        state, report = step(MODEL, state, hold_default(state), terrain, DT)
        assert np.all(report.normal_force >= 0.0)
        assert np.all(report.tangential_force <= terrain.friction[:, None] * report.normal_force + 1e-12)
        assert np.all(report.air_time >= 0.0)
        assert np.all(report.in_contact[report.touchdown])
        assert np.all(report.slip_velocity[~report.in_contact] == 0.0)


def test_touchdown_reported_once_with_speed():
    state = SimState.standing(MODEL)
    state.base_position[0, 2] += 0.02
    terrain = Terrain.flat()
    touchdowns = np.zeros(4, dtype=int)
    speeds = []
    for _ in range(200):
        state, report = step(MODEL, state, hold_default(state), terrain, DT)
        touchdowns += report.touchdown[0]
        speeds.extend(report.touchdown_speed[0][report.touchdown[0]].tolist())
    assert np.all(touchdowns >= 1)
    assert all(speed > 0.0 for speed in speeds)


def test_air_and_contact_intervals_cover_elapsed_time():
    n = 3
    state = SimState.standing(MODEL, n)
    state.base_position[:, 2] += np.array([0.0, 0.02, 0.05])
    terrain = Terrain.flat(n)
    default = np.tile(MODEL.arrays.default_pose, (n, 1))
    swing = np.zeros(N_JOINTS)
    swing[[0, 9]] = 0.6    # FL and RR shoulder pitch
    swing[[3, 6]] = -0.6   # FR and RL
    closed = np.zeros((n, 4))
    transitions = 0
    steps = 600
    for i in range(steps):
        targets = default + np.sin(2.0 * np.pi * 3.0 * i * DT) * swing
        previous = state
        state, report = step(MODEL, state, pd_torques(MODEL, state, command(targets, np.zeros((n, N_JOINTS)))),
                             terrain, DT)
        liftoff = previous.foot_in_contact & ~state.foot_in_contact
        closed += np.where(report.touchdown, report.touchdown_air_time, 0.0)
        closed += np.where(liftoff, previous.foot_contact_time, 0.0)
        transitions += int(report.touchdown.sum() + liftoff.sum())
        assert np.all(report.air_time >= 0.0)
    total = closed + state.foot_air_time + state.foot_contact_time
    assert transitions > 0
    assert np.all(np.abs(total - steps * DT) <= DT + 1e-12)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def test_static_feet_have_zero_velocity():
    _, velocity = foot_kinematics(MODEL, SimState.standing(MODEL))
    assert np.array_equal(velocity, np.zeros((1, 4, 3)))


def test_pure_translation_moves_every_foot():
    state = SimState.standing(MODEL)
    state.base_linear_velocity[0] = [0.3, -0.1, 0.05]
    _, velocity = foot_kinematics(MODEL, state)
    assert np.allclose(velocity[0], [0.3, -0.1, 0.05], atol=1e-15)


def test_forward_kinematics_matches_rotation_oracle():
    rng = np.random.default_rng(11)
    state = SimState.standing(MODEL, 5)
    state.base_orientation = random_quaternions(rng, 5)
    state.base_position = rng.normal(size=(5, 3))
    state.joint_positions = state.joint_positions + rng.uniform(-0.3, 0.3, size=(5, N_JOINTS))
    feet, _ = foot_kinematics(MODEL, state)
    for row in range(5):
        w, x, y, z = state.base_orientation[row]
        base = Rotation.from_quat([x, y, z, w])
        for leg_index, leg in enumerate(MODEL.legs):
            q = state.joint_positions[row, 3 * leg_index:3 * leg_index + 3]
            pitch = Rotation.from_rotvec(np.asarray(leg.joints[0].axis) * q[0])
            roll = Rotation.from_rotvec(np.asarray(leg.joints[1].axis) * q[1])
            ankle = Rotation.from_rotvec(np.asarray(leg.joints[2].axis) * q[2])
            down = np.array([0.0, 0.0, -1.0])
            local = (np.asarray(leg.hip_offset)
                     + (pitch * roll).apply(down * leg.joints[1].link_length)
                     + (pitch * roll * ankle).apply(down * leg.joints[2].link_length))
            expected = state.base_position[row] + base.apply(local)
            assert np.max(np.abs(feet[row, leg_index] - expected)) < 1e-10


def test_default_pose_puts_feet_under_hips():
    feet, _ = foot_kinematics(MODEL, SimState.standing(MODEL))
    hips = np.array([leg.hip_offset for leg in MODEL.legs])
    assert np.allclose(feet[0, :, :2], hips[:, :2], atol=1e-12)
    assert np.allclose(feet[0, :, 2], MODEL.stand_height - 0.15 * np.cos(0.77), atol=1e-12)


# ---------------------------------------------------------------------------
# Orientation helpers
# ---------------------------------------------------------------------------

def test_gravity_identity():
    assert np.allclose(gravity_orientation(SimState.standing(MODEL)), [[0.0, 0.0, -1.0]])


def test_gravity_upside_down():
    state = SimState.standing(MODEL)
    state.base_orientation[0] = [0.0, 1.0, 0.0, 0.0]
    assert np.allclose(gravity_orientation(state), [[0.0, 0.0, 1.0]], atol=1e-15)


def test_gravity_matches_matrix_oracle():
    rng = np.random.default_rng(5)
    state = SimState.standing(MODEL, 50)
    state.base_orientation = random_quaternions(rng, 50)
    g = gravity_orientation(state)
    w, x, y, z = state.base_orientation.T
    expected = Rotation.from_quat(np.stack([x, y, z, w], axis=1)).inv().apply([0.0, 0.0, -1.0])
    assert np.max(np.abs(g - expected)) < 1e-12
    assert np.allclose(np.linalg.norm(g, axis=1), 1.0)


def test_roll_pitch_matches_euler_oracle():
    rng = np.random.default_rng(6)
    angles = rng.uniform(-0.7, 0.7, size=(20, 3))
    rotation = Rotation.from_euler("ZYX", angles[:, ::-1])
    x, y, z, w = rotation.as_quat().T
    state = SimState.standing(MODEL, 20)
    state.base_orientation = np.stack([w, x, y, z], axis=1)
    roll, pitch = base_roll_pitch(state)
    assert np.allclose(roll, angles[:, 0], atol=1e-10)
    assert np.allclose(pitch, angles[:, 1], atol=1e-10)


def test_zero_impulse_leaves_state_untouched():
    state = SimState.standing(MODEL)
    assert apply_velocity_impulse(state, np.zeros(3)) is state


def test_impulse_adds_velocity():
    state = apply_velocity_impulse(SimState.standing(MODEL), np.array([0.2, 0.0, 0.0]))
    assert state.base_linear_velocity[0, 0] == 0.2
    assert np.array_equal(state.joint_positions, SimState.standing(MODEL).joint_positions)


def test_impulse_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        apply_velocity_impulse(SimState.standing(MODEL), np.array([np.inf, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# Collisions and terrain
# ---------------------------------------------------------------------------

def test_default_pose_has_no_self_collision():
    assert self_collision_count(MODEL, SimState.standing(MODEL))[0] == 0


def test_crossed_legs_collide():
    state = SimState.standing(MODEL)
    state.joint_positions[0, [1, 7]] = -0.8
    state.joint_positions[0, [4, 10]] = 0.8
    assert self_collision_count(MODEL, state)[0] >= 1


def test_collision_count_is_mirror_symmetric():
    state = SimState.standing(MODEL)
    state.joint_positions[0, 1] = -0.85
    state.joint_positions[0, 4] = 0.3
    mirrored = SimState.standing(MODEL)
    q = state.joint_positions[0].reshape(4, 3).copy()
    q = q[[1, 0, 3, 2]]
    q[:, 1] *= -1.0
    mirrored.joint_positions[0] = q.reshape(-1)
    assert self_collision_count(MODEL, state)[0] == self_collision_count(MODEL, mirrored)[0]


def test_trunk_ground_contact_when_lying_down():
    state = SimState.standing(MODEL)
    state.base_position[0, 2] = 0.01
    assert trunk_ground_contact(MODEL, state, Terrain.flat())[0]
    assert not trunk_ground_contact(MODEL, SimState.standing(MODEL), Terrain.flat())[0]


def test_ramp_surface_height():
    terrain = Terrain.ramp(np.radians(5.0), n=2)
    heights, normals = terrain.surface(np.array([[[1.0, 0.0]], [[-2.0, 3.0]]]))
    assert np.allclose(heights[:, 0], [np.tan(np.radians(5.0)), -2.0 * np.tan(np.radians(5.0))])
    assert np.allclose(np.linalg.norm(normals, axis=-1), 1.0)


def test_heightfield_is_periodic_and_bounded():
    rng = np.random.default_rng(2)
    terrain = Terrain.random_heightfield(np.array([0.01, 0.002]), np.array([0.5, 0.6]), rng)
    xy = rng.uniform(-3.0, 3.0, size=(2, 40, 2))
    heights, _ = terrain.surface(xy)
    shifted, _ = terrain.surface(xy + 4.0)
    assert np.allclose(heights, shifted, atol=1e-12)
    assert np.all(heights >= 0.0)
    assert np.all(heights[0] <= 0.01) and np.all(heights[1] <= 0.002)


def test_terrain_needs_exactly_one_mode():
    with pytest.raises(InvalidInputError):
        Terrain(friction=np.ones(1))
    with pytest.raises(InvalidInputError):
        Terrain.flat(friction=0.0)


def test_terrain_rows_round_trip():
    rng = np.random.default_rng(4)
    terrain = Terrain.random_heightfield(np.full(3, 0.01), np.array([0.4, 0.5, 0.6]), rng)
    subset = terrain.rows(np.array([2, 0]))
    assert np.array_equal(subset.friction, [0.6, 0.4])
    assert np.array_equal(subset.heights[1], terrain.heights[0])


# ---------------------------------------------------------------------------
# Model validation
# ---------------------------------------------------------------------------

def test_default_model_file_matches_defaults():
    loaded = load_robot_model(Path(__file__).parent / "models" / "default_robot.json")
    assert loaded.model_dump() == RobotModel().model_dump()


def test_model_file_overrides_defaults(tmp_path):
    path = tmp_path / "heavy.json"
    path.write_bytes(orjson.dumps({"base_mass": 2.0, "foot_radius": 0.015}))
    loaded = load_robot_model(path)
    assert loaded.total_mass == pytest.approx(2.6)
    assert loaded.foot_radius == 0.015
    path.write_bytes(b"{not json")
    with pytest.raises(ValueError):
        load_robot_model(path)


def test_total_mass():
    assert MODEL.total_mass == pytest.approx(2.2)


def test_model_rejects_bad_inertia():
    with pytest.raises(ValueError):
        RobotModel(base_inertia=[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])


def test_model_rejects_pose_outside_limits():
    with pytest.raises(ValueError):
        RobotModel(default_pose=[0.77, 0.0, 0.5] * 4)


def test_rows_and_with_rows():
    state = lifted(3)
    other = replace(lifted(1), base_position=np.array([[1.0, 2.0, 3.0]]))
    merged = state.with_rows(np.array([1]), other)
    assert np.array_equal(merged.base_position[1], [1.0, 2.0, 3.0])
    assert np.array_equal(merged.base_position[0], state.base_position[0])
    assert merged.rows(np.array([1])).batch_size == 1
