"""
Floating-base quadruped rigid-body simulation.

Every array held by SimState, ContactReport, ActuatorCommand and Terrain has a
leading batch axis of N independent robots. Rows never interact, so a batch of
one is a single robot and a batch of 256 is a vectorized training population.

Generalized velocities are ordered as
    u = [base linear velocity (world, 3), base angular velocity (body, 3), joint velocities (12)]
and joints are leg-major: FL, FR, RL, RR, each (shoulder_pitch, shoulder_roll, ankle_pitch).
"""
import logging
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

logger = logging.getLogger(__name__)

GRAVITY = 9.81
GRAVITY_VECTOR = np.array([0.0, 0.0, -GRAVITY])

LEG_NAMES = ("FL", "FR", "RL", "RR")
JOINT_NAMES = ("shoulder_pitch", "shoulder_roll", "ankle_pitch")
N_LEGS = 4
N_JOINTS = 12
N_DOF = 18

# Adaptive PD actuator constants: P = P_NOMINAL + P_SCALE*sigmoid(x), D likewise.
P_NOMINAL = 3.0
D_NOMINAL = 0.03
P_SCALE = 4.0
D_SCALE = 0.02

# Binary foot switch threshold in N.
CONTACT_SWITCH_FORCE = 0.5

JOINT_LIMIT_STIFFNESS = 20.0
JOINT_LIMIT_DAMPING = 0.2

_TRUNK_SAMPLES = 9


class SimulationError(Exception):
    """Base exception for simulation errors."""
    pass


class InvalidInputError(SimulationError):
    """Raised when a simulation input contains non-finite or malformed values."""
    pass


class DivergedStateError(SimulationError):
    """Raised when integration produces NaN/Inf values."""

    def __init__(self, body: str, rows: Sequence[int], state: "SimState" = None,
                 contact: "ContactReport" = None):
        super().__init__(f"Simulation diverged at body '{body}' (batch rows {list(rows)})")
        self.body = body
        self.rows = list(rows)
        self.state = state
        self.contact = contact


# ---------------------------------------------------------------------------
# Robot model
# ---------------------------------------------------------------------------

class JointModel(BaseModel):
    """One revolute joint and the link it drives."""
    model_config = ConfigDict(extra="forbid")

    name: str
    axis: Tuple[float, float, float] = Field(..., description="Joint axis in the parent link frame")
    limits: Tuple[float, float] = Field(..., description="Joint limits (lo, hi) in rad")
    link_length: float = Field(..., ge=0.0, description="Link length along the link's -z axis in m")
    link_mass: float = Field(..., gt=0.0, description="Link mass in kg")
    link_inertia: Tuple[float, float, float] = Field(..., description="Principal moments about the link COM in kg m^2")
    torque_limit: float = Field(..., gt=0.0, description="Actuator torque limit in N m")
    velocity_limit: float = Field(..., gt=0.0, description="Joint velocity limit in rad/s")

    @model_validator(mode="after")
    def check_joint(self) -> "JointModel":
        norm = float(np.linalg.norm(self.axis))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"joint '{self.name}' axis must be a unit vector (norm {norm})")
        if not self.limits[0] < self.limits[1]:
            raise ValueError(f"joint '{self.name}' limits must satisfy lo < hi")
        if min(self.link_inertia) <= 0.0:
            raise ValueError(f"joint '{self.name}' link inertia must be positive definite")
        return self


class LegModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    hip_offset: Tuple[float, float, float] = Field(..., description="Hip position from the base origin in m")
    joints: List[JointModel]

    @model_validator(mode="after")
    def check_leg(self) -> "LegModel":
        if len(self.joints) != 3:
            raise ValueError(f"leg '{self.name}' must have exactly 3 joints, got {len(self.joints)}")
        return self


def _default_leg(name: str, hip_offset: Tuple[float, float, float]) -> LegModel:
    return LegModel(
        name=name,
        hip_offset=hip_offset,
        joints=[
            JointModel(name="shoulder_pitch", axis=(0.0, 1.0, 0.0), limits=(-1.2, 1.8),
                       link_length=0.0, link_mass=0.02, link_inertia=(2e-6, 2e-6, 2e-6),
                       torque_limit=1.2, velocity_limit=20.0),
            JointModel(name="shoulder_roll", axis=(1.0, 0.0, 0.0), limits=(-0.9, 0.9),
                       link_length=0.075, link_mass=0.07, link_inertia=(3.3e-5, 3.3e-5, 2e-6),
                       torque_limit=1.2, velocity_limit=20.0),
            JointModel(name="ankle_pitch", axis=(0.0, 1.0, 0.0), limits=(-2.4, -0.2),
                       link_length=0.075, link_mass=0.06, link_inertia=(2.8e-5, 2.8e-5, 2e-6),
                       torque_limit=1.2, velocity_limit=20.0),
        ],
    )


def _default_legs() -> List[LegModel]:
    return [
        _default_leg("FL", (0.09, 0.05, 0.0)),
        _default_leg("FR", (0.09, -0.05, 0.0)),
        _default_leg("RL", (-0.09, 0.05, 0.0)),
        _default_leg("RR", (-0.09, -0.05, 0.0)),
    ]


class RobotModel(BaseModel):
    """
    Kinematic and inertial description of a 12-joint floating-base quadruped.

    The defaults describe a 2.2 kg stand-in for a small home quadruped; every
    value can be overridden from a JSON model file (see models/default_robot.json).
    """
    model_config = ConfigDict(extra="forbid")

    base_mass: float = Field(1.6, gt=0.0, description="Trunk mass in kg")
    base_inertia: List[List[float]] = Field(
        default_factory=lambda: [[1.81e-3, 0.0, 0.0], [0.0, 5.81e-3, 0.0], [0.0, 0.0, 6.67e-3]],
        description="Trunk inertia tensor about its COM in kg m^2",
    )
    legs: List[LegModel] = Field(default_factory=_default_legs)
    foot_radius: float = Field(0.012, gt=0.0, description="Foot sphere radius in m")
    link_radius: float = Field(0.01, gt=0.0, description="Leg capsule radius used for self-collision in m")
    trunk_half_extents: Tuple[float, float, float] = Field((0.10, 0.05, 0.03), description="Trunk box half extents in m")
    default_pose: List[float] = Field(default_factory=lambda: [0.77, 0.0, -1.54] * 4)
    stand_height: float = Field(0.12, gt=0.0, description="Base height when standing in default_pose in m")
    joint_armature: float = Field(0.003, ge=0.0, description="Reflected rotor inertia per joint in kg m^2")
    contact_stiffness: float = Field(4000.0, gt=0.0, description="Penalty contact stiffness in N/m")
    contact_damping: float = Field(40.0, ge=0.0, description="Penalty contact damping in N s/m")
    friction_damping: float = Field(40.0, ge=0.0, description="Tangential velocity damping in N s/m")

    @model_validator(mode="after")
    def check_model(self) -> "RobotModel":
        inertia = np.asarray(self.base_inertia, dtype=float)
        if inertia.shape != (3, 3):
            raise ValueError("base_inertia must be a 3x3 matrix")
        if not np.allclose(inertia, inertia.T, atol=1e-15):
            raise ValueError("base_inertia must be symmetric")
        if np.linalg.eigvalsh(inertia).min() <= 0.0:
            raise ValueError("base_inertia must be positive definite")
        if len(self.legs) != N_LEGS:
            raise ValueError(f"model must have exactly {N_LEGS} legs, got {len(self.legs)}")
        if len(self.default_pose) != N_JOINTS:
            raise ValueError(f"default_pose must have {N_JOINTS} entries")
        for index, angle in enumerate(self.default_pose):
            joint = self.legs[index // 3].joints[index % 3]
            if not joint.limits[0] <= angle <= joint.limits[1]:
                raise ValueError(f"default_pose[{index}] = {angle} outside limits of {self.legs[index // 3].name}_{joint.name}")
        return self

    @cached_property
    def arrays(self) -> "ModelArrays":
        return ModelArrays.from_model(self)

    @property
    def total_mass(self) -> float:
        return self.arrays.total_mass

    def joint_names(self) -> List[str]:
        return [f"{leg.name}_{joint.name}" for leg in self.legs for joint in leg.joints]


@dataclass(frozen=True)
class ModelArrays:
    """numpy views of a RobotModel used by the batched kernels."""
    hip_offsets: np.ndarray      # (4, 3)
    axes: np.ndarray             # (4, 3, 3) leg, joint, xyz
    lengths: np.ndarray          # (4, 3)
    masses: np.ndarray           # (4, 3)
    inertias: np.ndarray         # (4, 3, 3) principal moments
    limits_lo: np.ndarray        # (12,)
    limits_hi: np.ndarray        # (12,)
    torque_limits: np.ndarray    # (12,)
    velocity_limits: np.ndarray  # (12,)
    default_pose: np.ndarray     # (12,)
    base_mass: float
    base_inertia: np.ndarray     # (3, 3)
    total_mass: float

    @classmethod
    def from_model(cls, model: RobotModel) -> "ModelArrays":
        joints = [joint for leg in model.legs for joint in leg.joints]
        masses = np.array([[j.link_mass for j in leg.joints] for leg in model.legs])
        return cls(
            hip_offsets=np.array([leg.hip_offset for leg in model.legs], dtype=float),
            axes=np.array([[j.axis for j in leg.joints] for leg in model.legs], dtype=float),
            lengths=np.array([[j.link_length for j in leg.joints] for leg in model.legs]),
            masses=masses,
            inertias=np.array([[j.link_inertia for j in leg.joints] for leg in model.legs]),
            limits_lo=np.array([j.limits[0] for j in joints]),
            limits_hi=np.array([j.limits[1] for j in joints]),
            torque_limits=np.array([j.torque_limit for j in joints]),
            velocity_limits=np.array([j.velocity_limit for j in joints]),
            default_pose=np.array(model.default_pose, dtype=float),
            base_mass=float(model.base_mass),
            base_inertia=np.asarray(model.base_inertia, dtype=float),
            total_mass=float(model.base_mass + masses.sum()),
        )


def load_robot_model(path: Union[str, Path]) -> RobotModel:
    """Load a RobotModel from a JSON model file."""
    return RobotModel.model_validate(orjson.loads(Path(path).read_bytes()))


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

class _Batched:
    """Row-selection helpers shared by the batched dataclasses."""

    @property
    def batch_size(self) -> int:
        return getattr(self, fields(self)[0].name).shape[0]

    def copy(self):
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def rows(self, index):
        """Return a new batch holding only the selected rows."""
        return replace(self, **{f.name: getattr(self, f.name)[index] for f in fields(self)})

    def with_rows(self, index: np.ndarray, other):
        """Copy of self whose rows at `index` are replaced by the rows of `other`."""
        values = {}
        for f in fields(self):
            column = getattr(self, f.name).copy()
            column[index] = getattr(other, f.name)
            values[f.name] = column
        return replace(self, **values)


@dataclass
class SimState(_Batched):
    """Generalized coordinates and velocities of N robots plus foot contact bookkeeping."""
    base_position: np.ndarray                 # (N, 3) m
    base_orientation: np.ndarray              # (N, 4) unit quaternion (w, x, y, z)
    base_linear_velocity: np.ndarray          # (N, 3) m/s, world frame
    base_angular_velocity: np.ndarray         # (N, 3) rad/s, body frame
    joint_positions: np.ndarray               # (N, 12) rad
    joint_velocities: np.ndarray              # (N, 12) rad/s
    previous_joint_velocities: np.ndarray     # (N, 12) rad/s, at the previous control step
    previous_base_angular_velocity: np.ndarray  # (N, 3) rad/s, at the previous control step
    sim_time: np.ndarray                      # (N,) s
    foot_in_contact: np.ndarray               # (N, 4) bool
    foot_air_time: np.ndarray                 # (N, 4) s since last liftoff
    foot_contact_time: np.ndarray             # (N, 4) s since last touchdown

    @classmethod
    def standing(cls, model: RobotModel, n: int = 1, ground_height: Optional[np.ndarray] = None) -> "SimState":
        """N robots at stand height in default_pose, at rest, identity orientation."""
        position = np.zeros((n, 3))
        position[:, 2] = model.stand_height + (0.0 if ground_height is None else ground_height)
        orientation = np.zeros((n, 4))
        orientation[:, 0] = 1.0
        return cls(
            base_position=position,
            base_orientation=orientation,
            base_linear_velocity=np.zeros((n, 3)),
            base_angular_velocity=np.zeros((n, 3)),
            joint_positions=np.tile(model.arrays.default_pose, (n, 1)),
            joint_velocities=np.zeros((n, N_JOINTS)),
            previous_joint_velocities=np.zeros((n, N_JOINTS)),
            previous_base_angular_velocity=np.zeros((n, 3)),
            sim_time=np.zeros(n),
            foot_in_contact=np.zeros((n, N_LEGS), dtype=bool),
            foot_air_time=np.zeros((n, N_LEGS)),
            foot_contact_time=np.zeros((n, N_LEGS)),
        )

    def generalized_velocity(self) -> np.ndarray:
        return np.concatenate([self.base_linear_velocity, self.base_angular_velocity, self.joint_velocities], axis=1)


@dataclass
class ActuatorCommand(_Batched):
    target_joint_positions: np.ndarray  # (N, 12) rad
    gain_inputs: np.ndarray             # (N, 12) pre-sigmoid gain scale inputs x


@dataclass
class ContactReport(_Batched):
    in_contact: np.ndarray            # (N, 4) bool switch output f_c
    normal_force: np.ndarray          # (N, 4) N
    tangential_force: np.ndarray      # (N, 4) N, magnitude
    foot_velocity: np.ndarray         # (N, 4, 3) m/s, world frame
    touchdown: np.ndarray             # (N, 4) bool, contact began this step
    touchdown_speed: np.ndarray       # (N, 4) m/s, |v_f| at touchdown, 0 elsewhere
    touchdown_air_time: np.ndarray    # (N, 4) s, air time that ended at this touchdown
    air_time: np.ndarray              # (N, 4) s, accumulated since last liftoff
    slip_velocity: np.ndarray         # (N, 4, 2) m/s, tangential xy, 0 when not in contact
    self_collision_count: np.ndarray  # (N,) int


@dataclass
class Terrain:
    """
    Ground under N robots: a periodic height field or a planar ramp.

    Height fields are tiled periodically so robots never walk off the grid.
    """
    friction: np.ndarray                   # (N,) Coulomb coefficient
    heights: Optional[np.ndarray] = None   # (N, G, G) m
    cell_size: float = 0.05
    slope_angle: Optional[float] = None

    def __post_init__(self):
        if (self.heights is None) == (self.slope_angle is None):
            raise InvalidInputError("terrain needs exactly one of a height field or a ramp angle")
        if np.any(np.asarray(self.friction) <= 0.0):
            raise InvalidInputError("friction coefficient must be positive")
        if self.heights is not None and not np.all(np.isfinite(self.heights)):
            raise InvalidInputError("terrain heights must be finite")

    @classmethod
    def flat(cls, n: int = 1, friction: Union[float, np.ndarray] = 0.55) -> "Terrain":
        return cls(friction=np.broadcast_to(np.asarray(friction, dtype=float), (n,)).copy(),
                   heights=np.zeros((n, 2, 2)), cell_size=1.0)

    @classmethod
    def ramp(cls, angle: float, n: int = 1, friction: Union[float, np.ndarray] = 0.55) -> "Terrain":
        return cls(friction=np.broadcast_to(np.asarray(friction, dtype=float), (n,)).copy(),
                   slope_angle=float(angle))

    @classmethod
    def random_heightfield(cls, amplitude: np.ndarray, friction: np.ndarray, rng: np.random.Generator,
                           size: float = 4.0, cell_size: float = 0.05) -> "Terrain":
        """Uniform random heights in [0, amplitude] per robot on a periodic grid."""
        amplitude = np.asarray(amplitude, dtype=float)
        cells = int(round(size / cell_size))
        unit = rng.uniform(0.0, 1.0, size=(amplitude.shape[0], cells, cells))
        return cls(friction=np.asarray(friction, dtype=float).copy(),
                   heights=unit * amplitude[:, None, None], cell_size=cell_size)

    @property
    def batch_size(self) -> int:
        return self.friction.shape[0]

    def rows(self, index) -> "Terrain":
        heights = None if self.heights is None else self.heights[index]
        return replace(self, friction=self.friction[index], heights=heights)

    def with_rows(self, index: np.ndarray, other: "Terrain") -> "Terrain":
        """Copy of self whose rows at `index` come from `other`."""
        friction = self.friction.copy()
        friction[index] = other.friction
        if self.slope_angle is not None or other.slope_angle is not None:
            return replace(self, friction=friction)
        if self.heights.shape[1:] != other.heights.shape[1:]:
            raise InvalidInputError("cannot merge height fields of different grid shapes")
        heights = self.heights.copy()
        heights[index] = other.heights
        return replace(self, friction=friction, heights=heights)

    def surface(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Terrain height and unit normal below query points.

        Args:
            xy (np.ndarray): (N, K, 2) world xy positions

        Returns:
            Tuple[np.ndarray, np.ndarray]: heights (N, K) and normals (N, K, 3)
        """
        if self.slope_angle is not None:
            heights = xy[..., 0] * np.tan(self.slope_angle)
            normal = np.array([-np.sin(self.slope_angle), 0.0, np.cos(self.slope_angle)])
            return heights, np.broadcast_to(normal, xy.shape[:-1] + (3,)).copy()

        grid = self.heights.shape[1]
        fx = xy[..., 0] / self.cell_size
        fy = xy[..., 1] / self.cell_size
        ix, iy = np.floor(fx), np.floor(fy)
        tx, ty = fx - ix, fy - iy
        i0 = np.mod(ix.astype(np.int64), grid)
        j0 = np.mod(iy.astype(np.int64), grid)
        i1, j1 = np.mod(i0 + 1, grid), np.mod(j0 + 1, grid)
        rows = np.arange(self.heights.shape[0])[:, None]
        h00 = self.heights[rows, i0, j0]
        h10 = self.heights[rows, i1, j0]
        h01 = self.heights[rows, i0, j1]
        h11 = self.heights[rows, i1, j1]
        heights = (h00 * (1 - tx) * (1 - ty) + h10 * tx * (1 - ty)
                   + h01 * (1 - tx) * ty + h11 * tx * ty)
        dhdx = ((h10 - h00) * (1 - ty) + (h11 - h01) * ty) / self.cell_size
        dhdy = ((h01 - h00) * (1 - tx) + (h11 - h10) * tx) / self.cell_size
        normal = np.stack([-dhdx, -dhdy, np.ones_like(dhdx)], axis=-1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
        return heights, normal


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------

def skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def axis_angle_matrix(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rodrigues rotation for unit axes (..., 3) and angles (...)."""
    k = skew(np.broadcast_to(axes, angles.shape + (3,)))
    s = np.sin(angles)[..., None, None]
    c = np.cos(angles)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(rotvec, axis=-1)
    half = 0.5 * angle
    # sin(half)/angle -> 1/2 as angle -> 0
    scale = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5)
    return np.concatenate([np.cos(half)[..., None], rotvec * scale[..., None]], axis=-1)


def quat_from_yaw(yaw: np.ndarray) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=float)
    return np.stack([np.cos(yaw / 2), np.zeros_like(yaw), np.zeros_like(yaw), np.sin(yaw / 2)], axis=-1)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

@dataclass
class _Kinematics:
    rotation: np.ndarray        # (N, 3, 3) base
    joint_origins: np.ndarray   # (N, 4, 3, 3)
    joint_axes: np.ndarray      # (N, 4, 3, 3) world
    link_rotations: np.ndarray  # (N, 4, 3, 3, 3)
    com: np.ndarray             # (N, 4, 3, 3)
    link_ends: np.ndarray       # (N, 4, 3, 3)
    omega: np.ndarray           # (N, 4, 3, 3) world angular velocity per link
    com_bias: np.ndarray        # (N, 4, 3, 3) COM acceleration at zero generalized acceleration
    alpha_bias: np.ndarray      # (N, 4, 3, 3)
    foot_position: np.ndarray   # (N, 4, 3)
    foot_velocity: np.ndarray   # (N, 4, 3)


def _kinematics(model: RobotModel, state: SimState) -> _Kinematics:
    arr = model.arrays
    n = state.batch_size
    rotation = quat_to_matrix(state.base_orientation)
    base = state.base_position
    omega_base = np.einsum("nij,nj->ni", rotation, state.base_angular_velocity)
    q = state.joint_positions.reshape(n, N_LEGS, 3)
    qd = state.joint_velocities.reshape(n, N_LEGS, 3)

    origin = base[:, None, :] + np.einsum("nij,lj->nli", rotation, arr.hip_offsets)
    offset = origin - base[:, None, :]
    omega = np.broadcast_to(omega_base[:, None, :], (n, N_LEGS, 3)).copy()
    velocity = state.base_linear_velocity[:, None, :] + np.cross(omega, offset)
    accel = np.cross(omega, np.cross(omega, offset))
    alpha = np.zeros((n, N_LEGS, 3))
    link_rot = np.broadcast_to(rotation[:, None], (n, N_LEGS, 3, 3))

    shape = (n, N_LEGS, 3, 3)
    out = {key: np.empty(shape) for key in ("origins", "axes", "com", "ends", "omega", "com_bias", "alpha")}
    rotations = np.empty((n, N_LEGS, 3, 3, 3))
    for j in range(3):
        axis_world = np.einsum("nlab,lb->nla", link_rot, arr.axes[:, j])
        spin = axis_world * qd[:, :, j, None]
        alpha = alpha + np.cross(omega, spin)
        omega = omega + spin
        link_rot = link_rot @ axis_angle_matrix(arr.axes[:, j], q[:, :, j])
        direction = -link_rot[..., :, 2]
        length = arr.lengths[None, :, j, None]
        to_com = direction * length / 2
        to_end = direction * length
        out["origins"][:, :, j] = origin
        out["axes"][:, :, j] = axis_world
        out["com"][:, :, j] = origin + to_com
        out["ends"][:, :, j] = origin + to_end
        out["omega"][:, :, j] = omega
        out["alpha"][:, :, j] = alpha
        out["com_bias"][:, :, j] = accel + np.cross(alpha, to_com) + np.cross(omega, np.cross(omega, to_com))
        rotations[:, :, j] = link_rot
        velocity, accel = (velocity + np.cross(omega, to_end),
                           accel + np.cross(alpha, to_end) + np.cross(omega, np.cross(omega, to_end)))
        origin = origin + to_end

    return _Kinematics(
        rotation=rotation, joint_origins=out["origins"], joint_axes=out["axes"],
        link_rotations=rotations, com=out["com"], link_ends=out["ends"], omega=out["omega"],
        com_bias=out["com_bias"], alpha_bias=out["alpha"],
        foot_position=origin, foot_velocity=velocity,
    )


def _point_jacobian(kin: _Kinematics, base: np.ndarray, points: np.ndarray, upto: int) -> np.ndarray:
    """
    Linear Jacobian (N, 4, 3, 18) of one point per leg rigidly attached to link `upto`.
    """
    n = points.shape[0]
    jac = np.zeros((n, N_LEGS, 3, N_DOF))
    jac[..., :, 0:3] = np.eye(3)
    jac[..., :, 3:6] = -skew(points - base[:, None, :]) @ kin.rotation[:, None]
    for leg in range(N_LEGS):
        for k in range(upto + 1):
            col = 6 + 3 * leg + k
            jac[:, leg, :, col] = np.cross(kin.joint_axes[:, leg, k], points[:, leg] - kin.joint_origins[:, leg, k])
    return jac


def _link_jacobians(kin: _Kinematics, base: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Linear and angular COM Jacobians of every leg link, each (N, 4, 3, 3, 18)."""
    n = base.shape[0]
    jv = np.zeros((n, N_LEGS, 3, 3, N_DOF))
    jw = np.zeros((n, N_LEGS, 3, 3, N_DOF))
    jv[..., :, 0:3] = np.eye(3)
    jv[..., :, 3:6] = -skew(kin.com - base[:, None, None, :]) @ kin.rotation[:, None, None]
    jw[..., :, 3:6] = kin.rotation[:, None, None]
    for leg in range(N_LEGS):
        for j in range(3):
            for k in range(j + 1):
                col = 6 + 3 * leg + k
                axis = kin.joint_axes[:, leg, k]
                jv[:, leg, j, :, col] = np.cross(axis, kin.com[:, leg, j] - kin.joint_origins[:, leg, k])
                jw[:, leg, j, :, col] = axis
    return jv, jw


def _base_mass_properties(model: RobotModel, n: int, base_mass_delta: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    arr = model.arrays
    delta = np.zeros(n) if base_mass_delta is None else np.asarray(base_mass_delta, dtype=float)
    mass = arr.base_mass + delta
    if np.any(mass <= 0.0):
        raise InvalidInputError("randomized base mass must stay positive")
    inertia = arr.base_inertia[None] * (mass / arr.base_mass)[:, None, None]
    return mass, inertia


def _dynamics_terms(model: RobotModel, state: SimState, kin: _Kinematics,
                    base_mass_delta: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Mass matrix M (N, 18, 18) and bias forces h (N, 18) so that M u_dot + h = Q."""
    arr = model.arrays
    n = state.batch_size
    base_mass, base_inertia = _base_mass_properties(model, n, base_mass_delta)
    jv, jw = _link_jacobians(kin, state.base_position)

    inertia_world = np.einsum("nljab,ljb,nljcb->nljac", kin.link_rotations, arr.inertias, kin.link_rotations)
    mass_matrix = np.zeros((n, N_DOF, N_DOF))
    mass_matrix[:, 0:3, 0:3] = base_mass[:, None, None] * np.eye(3)
    mass_matrix[:, 3:6, 3:6] = base_inertia
    mass_matrix += np.einsum("nljai,lj,nljak->nik", jv, arr.masses, jv)
    mass_matrix += np.einsum("nljai,nljab,nljbk->nik", jw, inertia_world, jw)
    joint_diag = np.arange(6, N_DOF)
    mass_matrix[:, joint_diag, joint_diag] += model.joint_armature

    omega_body = state.base_angular_velocity
    bias = np.zeros((n, N_DOF))
    bias[:, 0:3] = -base_mass[:, None] * GRAVITY_VECTOR
    bias[:, 3:6] = np.cross(omega_body, np.einsum("nij,nj->ni", base_inertia, omega_body))
    linear = arr.masses[None, :, :, None] * (kin.com_bias - GRAVITY_VECTOR)
    angular = (np.einsum("nljab,nljb->nlja", inertia_world, kin.alpha_bias)
               + np.cross(kin.omega, np.einsum("nljab,nljb->nlja", inertia_world, kin.omega)))
    bias += np.einsum("nljai,nlja->ni", jv, linear)
    bias += np.einsum("nljai,nlja->ni", jw, angular)
    return mass_matrix, bias


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def pd_gains(gain_inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Proportional and derivative gains from gain scale inputs x; one sigmoid feeds both."""
    scale = expit(gain_inputs)
    return P_NOMINAL + P_SCALE * scale, D_NOMINAL + D_SCALE * scale


def pd_torques(model: RobotModel, state: SimState, cmd: ActuatorCommand) -> np.ndarray:
    """
    Adaptive PD actuator torques.

    Args:
        model (RobotModel): Robot description (torque limits)
        state (SimState): Current joint positions and velocities
        cmd (ActuatorCommand): Target joint positions a* and gain scale inputs x

    Returns:
        np.ndarray: (N, 12) joint torques in N m, clamped to the actuator limits
    """
    if not (np.all(np.isfinite(cmd.target_joint_positions)) and np.all(np.isfinite(cmd.gain_inputs))):
        raise InvalidInputError("actuator command contains non-finite values")
    if not (np.all(np.isfinite(state.joint_positions)) and np.all(np.isfinite(state.joint_velocities))):
        raise InvalidInputError("joint state contains non-finite values")
    p_gain, d_gain = pd_gains(cmd.gain_inputs)
    torques = p_gain * (cmd.target_joint_positions - state.joint_positions) - d_gain * state.joint_velocities
    limit = model.arrays.torque_limits
    return np.clip(torques, -limit, limit)


def foot_kinematics(model: RobotModel, state: SimState) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame foot centre positions and velocities, each (N, 4, 3)."""
    kin = _kinematics(model, state)
    return kin.foot_position, kin.foot_velocity


def gravity_orientation(state: SimState) -> np.ndarray:
    """Unit gravity direction expressed in the base frame, (N, 3)."""
    rotation = quat_to_matrix(state.base_orientation)
    return -rotation[:, 2, :]


def base_roll_pitch(state: SimState) -> Tuple[np.ndarray, np.ndarray]:
    w, x, y, z = np.moveaxis(state.base_orientation, -1, 0)
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    return roll, pitch


def base_velocity_in_body(state: SimState) -> np.ndarray:
    rotation = quat_to_matrix(state.base_orientation)
    return np.einsum("nji,nj->ni", rotation, state.base_linear_velocity)


def apply_velocity_impulse(state: SimState, delta_v: np.ndarray) -> SimState:
    """Add a base linear velocity impulse; nothing else changes."""
    delta_v = np.asarray(delta_v, dtype=float)
    if not np.all(np.isfinite(delta_v)):
        raise InvalidInputError("velocity impulse must be finite")
    if not np.any(delta_v):
        return state
    return replace(state, base_linear_velocity=state.base_linear_velocity + delta_v)


def _segment_distance(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Closest distance between segments p1q1 and p2q2, batched over leading axes."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a = np.maximum(np.sum(d1 * d1, axis=-1), 1e-18)
    e = np.maximum(np.sum(d2 * d2, axis=-1), 1e-18)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    denom = a * e - b * b
    s = np.where(denom > 1e-18, np.clip((b * f - c * e) / np.where(denom > 1e-18, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / e
    s = np.where(t < 0.0, np.clip(-c / a, 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    gap = (p1 + d1 * s[..., None]) - (p2 + d2 * t[..., None])
    return np.linalg.norm(gap, axis=-1)


_CAPSULE_PAIRS = [(a, b) for a in range(8) for b in range(a + 1, 8) if a // 2 != b // 2]


def _count_self_collisions(model: RobotModel, state: SimState, kin: _Kinematics) -> np.ndarray:
    n = state.batch_size
    # capsules: index 2*leg + (0 upper, 1 lower)
    starts = kin.joint_origins[:, :, 1:3].reshape(n, 8, 3)
    ends = kin.link_ends[:, :, 1:3].reshape(n, 8, 3)
    first = np.array([p[0] for p in _CAPSULE_PAIRS])
    second = np.array([p[1] for p in _CAPSULE_PAIRS])
    distance = _segment_distance(starts[:, first], ends[:, first], starts[:, second], ends[:, second])
    count = np.sum(distance < 2 * model.link_radius, axis=1)

    # trunk box vs lower links; trunk and upper links are adjacent
    samples = np.linspace(0.0, 1.0, _TRUNK_SAMPLES)
    lower_start = kin.joint_origins[:, :, 2]
    lower_end = kin.link_ends[:, :, 2]
    points = lower_start[:, :, None] + (lower_end - lower_start)[:, :, None] * samples[None, None, :, None]
    local = np.einsum("nji,nlsj->nlsi", kin.rotation, points - state.base_position[:, None, None, :])
    outside = np.maximum(np.abs(local) - np.asarray(model.trunk_half_extents), 0.0)
    trunk_distance = np.linalg.norm(outside, axis=-1).min(axis=2)
    count = count + np.sum(trunk_distance < model.link_radius, axis=1)
    return count.astype(np.int64)


def self_collision_count(model: RobotModel, state: SimState) -> np.ndarray:
    """Colliding pairs among the trunk box and 8 leg-link capsules, excluding adjacent pairs."""
    return _count_self_collisions(model, state, _kinematics(model, state))


def trunk_ground_contact(model: RobotModel, state: SimState, terrain: Terrain) -> np.ndarray:
    """True for robots whose trunk box has a corner below the terrain surface."""
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    corners_local = signs * np.asarray(model.trunk_half_extents)
    rotation = quat_to_matrix(state.base_orientation)
    corners = state.base_position[:, None, :] + np.einsum("nij,kj->nki", rotation, corners_local)
    heights, _ = terrain.surface(corners[..., :2])
    return np.any(corners[..., 2] < heights, axis=1)


def mechanical_energy(model: RobotModel, state: SimState, base_mass_delta: Optional[np.ndarray] = None) -> np.ndarray:
    """Kinetic plus gravitational potential energy of every robot in J."""
    kin = _kinematics(model, state)
    mass_matrix, _ = _dynamics_terms(model, state, kin, base_mass_delta)
    u = state.generalized_velocity()
    kinetic = 0.5 * np.einsum("ni,nij,nj->n", u, mass_matrix, u)
    base_mass, _ = _base_mass_properties(model, state.batch_size, base_mass_delta)
    potential = GRAVITY * (base_mass * state.base_position[:, 2]
                           + np.einsum("lj,nlj->n", model.arrays.masses, kin.com[..., 2]))
    return kinetic + potential


def _contact_forces(model: RobotModel, kin: _Kinematics, terrain: Terrain):
    heights, normals = terrain.surface(kin.foot_position[..., :2])
    separation = (kin.foot_position[..., 2] - heights) * normals[..., 2]
    penetration = model.foot_radius - separation
    normal_speed = np.sum(kin.foot_velocity * normals, axis=-1)
    normal_force = np.where(
        penetration > 0.0,
        np.maximum(0.0, model.contact_stiffness * penetration - model.contact_damping * normal_speed),
        0.0,
    )
    tangential_velocity = kin.foot_velocity - normal_speed[..., None] * normals
    tangential = -model.friction_damping * tangential_velocity
    magnitude = np.linalg.norm(tangential, axis=-1)
    cone = terrain.friction[:, None] * normal_force
    scale = np.where(magnitude > cone, cone / np.maximum(magnitude, 1e-300), 1.0)
    tangential = tangential * scale[..., None]
    force = normal_force[..., None] * normals + tangential
    return force, normal_force, np.linalg.norm(tangential, axis=-1), tangential_velocity


def _first_nonfinite_body(state: SimState, rows: np.ndarray, names: List[str]) -> str:
    row = rows[0]
    for value in (state.base_position, state.base_orientation, state.base_linear_velocity, state.base_angular_velocity):
        if not np.all(np.isfinite(value[row])):
            return "base"
    bad = ~(np.isfinite(state.joint_positions[row]) & np.isfinite(state.joint_velocities[row]))
    return names[int(np.argmax(bad))]


def step(model: RobotModel, state: SimState, torques: np.ndarray, terrain: Terrain, dt: float,
         external_force: Optional[np.ndarray] = None, external_torque: Optional[np.ndarray] = None,
         base_mass_delta: Optional[np.ndarray] = None, locked: Optional[np.ndarray] = None,
         with_self_collisions: bool = True) -> Tuple[SimState, ContactReport]:
    """
    Advance every robot by one semi-implicit Euler step.

    Velocities are updated first from M(q) u_dot = Q - h(q, u). Joint angles and
    the orientation are integrated with the new velocities; the base translation
    uses the mean of the old and new linear velocity, which is exact under the
    constant acceleration of a ballistic flight. The quaternion is re-normalized.

    Args:
        model (RobotModel): Robot description
        state (SimState): Batch of robot states
        torques (np.ndarray): (N, 12) joint torques in N m
        terrain (Terrain): Ground under each robot
        dt (float): Step size in s
        external_force (np.ndarray): Optional (N, 3) world force at the base COM
        external_torque (np.ndarray): Optional (N, 3) torque about the base axes
        base_mass_delta (np.ndarray): Optional (N,) base mass offset in kg
        locked (np.ndarray): Optional (18,) or (N, 18) mask of generalized velocities held fixed
        with_self_collisions (bool): Whether to fill ContactReport.self_collision_count

    Returns:
        Tuple[SimState, ContactReport]: new state and contact report for this step
    """
    if not dt > 0.0:
        raise InvalidInputError(f"step size must be positive, got {dt}")
    torques = np.asarray(torques, dtype=float)
    if not np.all(np.isfinite(torques)):
        raise InvalidInputError("torques contain non-finite values")
    n = state.batch_size
    arr = model.arrays

    kin = _kinematics(model, state)
    mass_matrix, bias = _dynamics_terms(model, state, kin, base_mass_delta)
    contact_force, normal_force, tangential_force, tangential_velocity = _contact_forces(model, kin, terrain)

    q = state.joint_positions
    qd = state.joint_velocities
    limit_torque = (JOINT_LIMIT_STIFFNESS * (np.maximum(arr.limits_lo - q, 0.0) - np.maximum(q - arr.limits_hi, 0.0))
                    - JOINT_LIMIT_DAMPING * qd * ((q < arr.limits_lo) | (q > arr.limits_hi)))

    generalized = np.zeros((n, N_DOF))
    generalized[:, 6:] = torques + limit_torque
    if external_force is not None:
        generalized[:, 0:3] += external_force
    if external_torque is not None:
        generalized[:, 3:6] += external_torque
    foot_jac = _point_jacobian(kin, state.base_position, kin.foot_position, upto=2)
    generalized += np.einsum("nlai,nla->ni", foot_jac, contact_force)

    rhs = generalized - bias
    if locked is not None:
        mask = np.broadcast_to(np.asarray(locked, dtype=bool), (n, N_DOF))
        keep = ~mask
        mass_matrix = mass_matrix * (keep[:, :, None] & keep[:, None, :])
        mass_matrix[mask.nonzero()[0], mask.nonzero()[1], mask.nonzero()[1]] = 1.0
        rhs = np.where(mask, 0.0, rhs)
    accel = np.linalg.solve(mass_matrix, rhs[..., None])[..., 0]

    u = state.generalized_velocity() + dt * accel
    u[:, 6:] = np.clip(u[:, 6:], -arr.velocity_limits, arr.velocity_limits)
    linear, angular, joint_velocity = u[:, 0:3], u[:, 3:6], u[:, 6:]

    orientation = quat_multiply(state.base_orientation, quat_from_rotvec(angular * dt))
    orientation /= np.linalg.norm(orientation, axis=-1, keepdims=True)

    in_contact = normal_force > CONTACT_SWITCH_FORCE
    touchdown = in_contact & ~state.foot_in_contact
    liftoff = ~in_contact & state.foot_in_contact
    speed = np.linalg.norm(kin.foot_velocity, axis=-1)
    air_time = np.where(in_contact, 0.0, np.where(liftoff, dt, state.foot_air_time + dt))
    contact_time = np.where(in_contact, np.where(touchdown, dt, state.foot_contact_time + dt), 0.0)

    new_state = SimState(
        base_position=state.base_position + 0.5 * dt * (state.base_linear_velocity + linear),
        base_orientation=orientation,
        base_linear_velocity=linear,
        base_angular_velocity=angular,
        joint_positions=q + dt * joint_velocity,
        joint_velocities=joint_velocity,
        previous_joint_velocities=state.previous_joint_velocities.copy(),
        previous_base_angular_velocity=state.previous_base_angular_velocity.copy(),
        sim_time=state.sim_time + dt,
        foot_in_contact=in_contact,
        foot_air_time=air_time,
        foot_contact_time=contact_time,
    )
    report = ContactReport(
        in_contact=in_contact,
        normal_force=normal_force,
        tangential_force=tangential_force,
        foot_velocity=kin.foot_velocity,
        touchdown=touchdown,
        touchdown_speed=np.where(touchdown, speed, 0.0),
        touchdown_air_time=np.where(touchdown, state.foot_air_time, 0.0),
        air_time=air_time,
        slip_velocity=np.where(in_contact[..., None], tangential_velocity[..., :2], 0.0),
        self_collision_count=(_count_self_collisions(model, state, kin) if with_self_collisions
                              else np.zeros(n, dtype=np.int64)),
    )

    finite = np.ones(n, dtype=bool)
    for value in (new_state.base_position, new_state.base_orientation, new_state.base_linear_velocity,
                  new_state.base_angular_velocity, new_state.joint_positions, new_state.joint_velocities):
        finite &= np.all(np.isfinite(value), axis=1)
    if not np.all(finite):
        rows = np.flatnonzero(~finite)
        body = _first_nonfinite_body(new_state, rows, model.joint_names())
        logger.warning(f"Integration diverged at {body} in rows {rows.tolist()}")
        raise DivergedStateError(body, rows, state=new_state, contact=report)
    return new_state, report
