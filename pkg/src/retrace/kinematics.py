"""Serial-chain kinematics: forward kinematics, Jacobians, surface sampling.

Chains are fixed-base serial arms whose joints are either revolute or
prismatic, each with a constant origin transform, scalar limits, and a
velocity limit.  The end effector carries a constant offset pose after the
last joint.  Batched variants evaluate whole trajectories of configurations
at once; the trajectory optimizers depend on them for speed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from retrace.errors import ValidationError
from retrace.geometry import Pose

JOINT_KINDS = ("revolute", "prismatic")

# Axis vectors shorter than this are rejected rather than normalized.
AXIS_NORM_EPSILON = 1e-9


@dataclass
class JointSpec:
    """One joint: kind, rotation/translation axis, origin, and limits."""

    kind: str
    axis: np.ndarray
    origin: Pose
    lower: float
    upper: float
    vel_limit: float

    def __post_init__(self) -> None:
        if self.kind not in JOINT_KINDS:
            raise ValueError(f"joint kind must be one of {JOINT_KINDS}, got {self.kind!r}")
        self.axis = np.asarray(self.axis, dtype=float)
        if self.axis.shape != (3,):
            raise ValueError(f"joint axis must have shape (3,), got {self.axis.shape}")
        norm = float(np.linalg.norm(self.axis))
        if norm < AXIS_NORM_EPSILON:
            raise ValueError("joint axis must be nonzero")
        self.axis = self.axis / norm
        if not self.lower <= self.upper:
            raise ValueError(f"joint limits must satisfy lower <= upper, got [{self.lower}, {self.upper}]")
        if not self.vel_limit > 0.0:
            raise ValueError(f"velocity limit must be positive, got {self.vel_limit}")


@dataclass
class LinkCloud:
    """Collision proxy for one link: sphere centers with radii, link frame."""

    points: np.ndarray
    radii: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(self.points) != len(self.radii):
            raise ValueError("link cloud points and radii must have equal length")
        if np.any(self.radii < 0.0):
            raise ValueError("link cloud radii must be nonnegative")


@dataclass
class KinematicChain:
    """Fixed-base serial chain with an end-effector offset."""

    name: str
    joints: list[JointSpec]
    ee_offset: Pose
    link_clouds: list[LinkCloud] = field(default_factory=list)
    base_frame: str = "base"

    def __post_init__(self) -> None:
        if len(self.joints) < 1:
            raise ValueError("chain must have at least one joint")
        if self.link_clouds and len(self.link_clouds) != len(self.joints):
            raise ValueError(
                f"expected one link cloud per joint ({len(self.joints)}), got {len(self.link_clouds)}"
            )

    @property
    def n(self) -> int:
        return len(self.joints)

    def lower_limits(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    def upper_limits(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    def velocity_limits(self) -> np.ndarray:
        return np.array([j.vel_limit for j in self.joints])

    def mid_config(self) -> np.ndarray:
        return 0.5 * (self.lower_limits() + self.upper_limits())


@dataclass
class JointConfig:
    """A configuration vector for a specific chain size."""

    q: np.ndarray

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float).reshape(-1)


@dataclass
class GripperPointSet:
    """Immutable set of end-effector surface points used by goal costs."""

    points: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.array(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("gripper point set must be non-empty")
        self.points.flags.writeable = False

    def __len__(self) -> int:
        return len(self.points)


class FrameBatch(NamedTuple):
    """World-frame quantities for a batch of configurations.

    rot/pos index the frame after each joint's motion, axis is the joint axis
    in world coordinates, and rot_ee/t_ee include the end-effector offset.
    """

    rot: np.ndarray  # (B, n, 3, 3)
    pos: np.ndarray  # (B, n, 3)
    axis: np.ndarray  # (B, n, 3)
    rot_ee: np.ndarray  # (B, 3, 3)
    t_ee: np.ndarray  # (B, 3)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _axis_rotations(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """(B, 3, 3) Rodrigues rotations about a fixed axis."""
    k = _skew(axis)
    outer = np.outer(axis, axis)
    cos = np.cos(angles)[:, None, None]
    sin = np.sin(angles)[:, None, None]
    return cos * np.eye(3) + sin * k + (1.0 - cos) * outer


def batch_frames(chain: KinematicChain, configs: np.ndarray) -> FrameBatch:
    """Evaluate every joint frame and the end effector for (B, n) configs."""
    configs = np.asarray(configs, dtype=float)
    if configs.ndim != 2 or configs.shape[1] != chain.n:
        raise ValueError(f"configs must have shape (B, {chain.n}), got {configs.shape}")
    batch = configs.shape[0]
    rot = np.broadcast_to(np.eye(3), (batch, 3, 3)).copy()
    pos = np.zeros((batch, 3))
    rot_out = np.empty((batch, chain.n, 3, 3))
    pos_out = np.empty((batch, chain.n, 3))
    axis_out = np.empty((batch, chain.n, 3))
    for j, joint in enumerate(chain.joints):
        pos = pos + rot @ joint.origin.t
        rot = rot @ joint.origin.matrix()
        if joint.kind == "revolute":
            rot = rot @ _axis_rotations(joint.axis, configs[:, j])
        else:
            pos = pos + (rot @ joint.axis) * configs[:, j][:, None]
        rot_out[:, j] = rot
        pos_out[:, j] = pos
        axis_out[:, j] = rot @ joint.axis
    t_ee = pos + rot @ chain.ee_offset.t
    rot_ee = rot @ chain.ee_offset.matrix()
    return FrameBatch(rot_out, pos_out, axis_out, rot_ee, t_ee)


def forward_kinematics(chain: KinematicChain, q: np.ndarray) -> Pose:
    """End-effector pose for a single configuration."""
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise ValueError(f"configuration must have shape ({chain.n},), got {q.shape}")
    frames = batch_frames(chain, q[None, :])
    return Pose.from_matrix(frames.rot_ee[0], frames.t_ee[0])


def _prismatic_mask(chain: KinematicChain) -> np.ndarray:
    return np.array([j.kind == "prismatic" for j in chain.joints])


def batch_point_jacobians(
    chain: KinematicChain,
    frames: FrameBatch,
    points: np.ndarray,
    link_index: np.ndarray,
) -> np.ndarray:
    """d(world point)/dq for points rigidly attached to chain links.

    points is (B, K, 3) in world coordinates, link_index is (K,) giving the
    link each point rides on.  Returns (B, K, 3, n).  Columns for joints past
    a point's link are zero.
    """
    batch, count = points.shape[0], points.shape[1]
    n = chain.n
    axis = frames.axis[:, None, :, :]  # (B, 1, n, 3)
    lever = points[:, :, None, :] - frames.pos[:, None, :, :]  # (B, K, n, 3)
    cols = np.cross(axis, lever)  # revolute columns
    prismatic = _prismatic_mask(chain)
    if prismatic.any():
        cols[:, :, prismatic, :] = np.broadcast_to(
            axis[:, :, prismatic, :], (batch, count, int(prismatic.sum()), 3)
        )
    active = np.arange(n)[None, :] <= np.asarray(link_index).reshape(-1, 1)  # (K, n)
    cols = cols * active[None, :, :, None]
    return np.transpose(cols, (0, 1, 3, 2))


def pose_jacobian(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """Geometric Jacobian (6, n): rows 0-2 linear, rows 3-5 angular."""
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise ValueError(f"configuration must have shape ({chain.n},), got {q.shape}")
    frames = batch_frames(chain, q[None, :])
    axis = frames.axis[0]  # (n, 3)
    lever = frames.t_ee[0][None, :] - frames.pos[0]  # (n, 3)
    linear = np.cross(axis, lever)
    angular = axis.copy()
    prismatic = _prismatic_mask(chain)
    linear[prismatic] = axis[prismatic]
    angular[prismatic] = 0.0
    return np.vstack([linear.T, angular.T])


def robot_points(chain: KinematicChain, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-frame collision sphere centers and radii at configuration q."""
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise ValueError(f"configuration must have shape ({chain.n},), got {q.shape}")
    if not chain.link_clouds:
        return np.zeros((0, 3)), np.zeros(0)
    frames = batch_frames(chain, q[None, :])
    pts, radii = [], []
    for link, cloud in enumerate(chain.link_clouds):
        if len(cloud.points) == 0:
            continue
        rot, pos = frames.rot[0, link], frames.pos[0, link]
        pts.append(cloud.points @ rot.T + pos)
        radii.append(cloud.radii)
    if not pts:
        return np.zeros((0, 3)), np.zeros(0)
    return np.vstack(pts), np.concatenate(radii)


@dataclass
class TriMesh:
    """Triangle mesh with (V, 3) vertices and (F, 3) vertex-index faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=int).reshape(-1, 3)
        if len(self.vertices) < 3 or len(self.faces) < 1:
            raise ValueError("mesh must have at least 3 vertices and 1 face")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValueError("face indices out of vertex range")

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_gripper_points(mesh: TriMesh, m: int, seed: int) -> GripperPointSet:
    """Sample m points on the mesh surface, area-weighted, deterministically.

    Faces are drawn with probability proportional to area; barycentric
    coordinates are uniform on each face.  The same (mesh, m, seed) always
    produces bit-identical output.
    """
    if m < 1:
        raise ValueError(f"sample count must be positive, got {m}")
    areas = mesh.face_areas()
    total = float(areas.sum())
    if total <= 0.0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(mesh.faces), size=m, p=areas / total)
    u = rng.random(m)
    v = rng.random(m)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    tri = mesh.vertices[mesh.faces[face_idx]]  # (m, 3, 3)
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return GripperPointSet(pts)


def box_mesh(sx: float, sy: float, sz: float, center: np.ndarray | None = None) -> TriMesh:
    """Axis-aligned box with extents (sx, sy, sz), two triangles per face."""
    if center is None:
        center = np.zeros(3)
    h = 0.5 * np.array([sx, sy, sz])
    corners = np.array(
        [[x, y, z] for x in (-h[0], h[0]) for y in (-h[1], h[1]) for z in (-h[2], h[2])]
    ) + np.asarray(center)
    # Corner order: bit 2 = x, bit 1 = y, bit 0 = z.
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriMesh(corners, np.array(faces))


def uv_sphere_mesh(radius: float, n_lat: int = 12, n_lon: int = 24) -> TriMesh:
    """Latitude/longitude triangulation of a sphere centered at the origin."""
    if radius <= 0.0 or n_lat < 3 or n_lon < 3:
        raise ValueError("sphere mesh needs positive radius and >= 3 subdivisions")
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            theta = 2.0 * np.pi * j / n_lon
            verts.append(
                (
                    radius * np.sin(phi) * np.cos(theta),
                    radius * np.sin(phi) * np.sin(theta),
                    radius * np.cos(phi),
                )
            )
    verts.append((0.0, 0.0, -radius))
    top, bottom = 0, len(verts) - 1

    def ring(i: int, j: int) -> int:
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((top, ring(1, j), ring(1, j + 1)))
        faces.append((bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            faces.append((ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)))
            faces.append((ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)))
    return TriMesh(np.array(verts), np.array(faces))


def default_ee_points(m: int = 32, seed: int = 7) -> GripperPointSet:
    """Default end-effector point set: samples on a gripper-sized box."""
    return sample_gripper_points(box_mesh(0.12, 0.08, 0.05), m, seed)


def chain_to_dict(chain: KinematicChain) -> dict:
    return {
        "name": chain.name,
        "base_frame": chain.base_frame,
        "joints": [
            {
                "kind": j.kind,
                "axis": [float(v) for v in j.axis],
                "origin": j.origin.to_dict(),
                "lower": float(j.lower),
                "upper": float(j.upper),
                "vel_limit": float(j.vel_limit),
            }
            for j in chain.joints
        ],
        "ee_offset": chain.ee_offset.to_dict(),
        "link_points": [
            [
                {"xyz": [float(v) for v in p], "r": float(r)}
                for p, r in zip(cloud.points, cloud.radii)
            ]
            for cloud in chain.link_clouds
        ],
    }


def chain_from_dict(data: dict) -> KinematicChain:
    try:
        joints = [
            JointSpec(
                kind=j["kind"],
                axis=np.array(j["axis"], dtype=float),
                origin=Pose.from_dict(j["origin"]),
                lower=float(j["lower"]),
                upper=float(j["upper"]),
                vel_limit=float(j["vel_limit"]),
            )
            for j in data["joints"]
        ]
        link_clouds = [
            LinkCloud(
                points=np.array([p["xyz"] for p in cloud], dtype=float).reshape(-1, 3),
                radii=np.array([p["r"] for p in cloud], dtype=float),
            )
            for cloud in data.get("link_points", [])
        ]
        return KinematicChain(
            name=data["name"],
            joints=joints,
            ee_offset=Pose.from_dict(data["ee_offset"]),
            link_clouds=link_clouds,
            base_frame=data.get("base_frame", "base"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"invalid chain description: {exc}") from exc


def load_chain(path: str | Path) -> KinematicChain:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"chain file {path} is not valid JSON: {exc}") from exc
    return chain_from_dict(data)


def save_chain(chain: KinematicChain, path: str | Path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(chain), indent=2))
