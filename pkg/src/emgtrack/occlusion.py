"""Hand geometry, forward kinematics and ray-cast self-occlusion.

Hand frame: origin at the wrist, +x toward the fingertips, +y toward the
index finger, +z out of the back of the hand. Flexion turns a finger toward
-z (the palmar side). All lengths are in centimetres.

Geometry is one oriented box for the palm plus a capsule per phalanx. A
tracked bone (proximal or intermediate phalanx of index..pinky) is occluded
when the open segment from the camera to the bone midpoint hits any
primitive other than the bone itself and its chain neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import FINGERS, InvalidInputError

CAPSULE_RADIUS = 0.8
DISTAL_COUPLING = 0.6
_EPS = 1e-9


@dataclass(frozen=True)
class HandSkeleton:
    palm_length: float = 9.0
    palm_width: float = 8.0
    palm_thickness: float = 2.5
    knuckle_y: tuple = (3.0, 1.0, -1.0, -3.0)  # index, middle, ring, pinky
    proximal: tuple = (4.5, 4.8, 4.4, 3.5)
    intermediate: tuple = (2.5, 2.9, 2.7, 2.0)
    distal: tuple = (2.0, 2.2, 2.1, 1.8)
    capsule_radius: float = CAPSULE_RADIUS

    def __post_init__(self):
        lengths = (self.palm_length, self.palm_width, self.palm_thickness, self.capsule_radius,
                   *self.proximal, *self.intermediate, *self.distal)
        if min(lengths) <= 0:
            raise InvalidInputError("all skeleton dimensions must be positive")

    def knuckles(self) -> np.ndarray:
        """4 x 3 knuckle positions in the hand frame."""
        return np.array([[self.palm_length, y, 0.0] for y in self.knuckle_y])

    def bone_lengths(self) -> np.ndarray:
        """4 x 3 (proximal, intermediate, distal) per finger."""
        return np.array([self.proximal, self.intermediate, self.distal]).T

    @property
    def palm_center(self) -> np.ndarray:
        return np.array([self.palm_length / 2.0, 0.0, 0.0])

    @property
    def palm_half_extents(self) -> np.ndarray:
        return np.array([self.palm_length, self.palm_width, self.palm_thickness]) / 2.0


# -- rotations ---------------------------------------------------------------------

def quat_to_matrix(q) -> np.ndarray:
    """(w, x, y, z) unit quaternion to a 3 x 3 rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        q = [0.0, 0.0, 0.0, 0.0]
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class RootPose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + np.asarray(self.position, dtype=np.float64)


# -- kinematics ------------------------------------------------------------------

@dataclass
class BoneFrames:
    """Bone endpoints for T frames: arrays T x 4 fingers x 3 bones x 3 coords."""

    start: np.ndarray
    end: np.ndarray

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)

    def tracked_midpoints(self) -> np.ndarray:
        """T x 8 x 3 midpoints in joint order (index MCP, index PIP, ...)."""
        return self.mid[:, :, :2, :].reshape(len(self.start), 8, 3)


def forward_kinematics(skeleton: HandSkeleton, angles, root: RootPose | None = None) -> BoneFrames:
    """Planar flexion chain per finger; ``angles`` is 8 or T x 8 degrees.

    Proximal turns by MCP at the knuckle, intermediate by PIP relative to it,
    distal by 0.6 * PIP relative to the intermediate.
    """
    a = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    if a.shape[1] != 8:
        raise InvalidInputError("expected 8 joint angles per frame")
    mcp = np.radians(a[:, 0::2])
    pip = np.radians(a[:, 1::2])
    cumulative = np.stack([mcp, mcp + pip, mcp + pip + DISTAL_COUPLING * pip], axis=-1)  # T x 4 x 3
    direction = np.stack([np.cos(cumulative), np.zeros_like(cumulative), -np.sin(cumulative)], axis=-1)
    seg = direction * skeleton.bone_lengths()[None, :, :, None]
    ends = skeleton.knuckles()[None, :, None, :] + np.cumsum(seg, axis=2)
    starts = np.concatenate([np.broadcast_to(skeleton.knuckles()[None, :, None, :], ends[:, :, :1].shape),
                             ends[:, :, :-1]], axis=2)
    if root is not None:
        starts = root.apply(starts)
        ends = root.apply(ends)
    return BoneFrames(starts, ends)


@dataclass
class HandGeometry:
    """Palm box plus phalanx capsules for T frames."""

    box_center: np.ndarray     # 3
    box_rotation: np.ndarray   # 3 x 3, columns are box axes in world frame
    box_half: np.ndarray       # 3
    bones: BoneFrames
    radius: float = CAPSULE_RADIUS

    @classmethod
    def build(cls, skeleton: HandSkeleton, angles, root: RootPose | None = None) -> "HandGeometry":
        root = root or RootPose()
        return cls(root.apply(skeleton.palm_center), root.rotation, skeleton.palm_half_extents,
                   forward_kinematics(skeleton, angles, root), skeleton.capsule_radius)


# -- ray tests ------------------------------------------------------------------------

def _unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm < _EPS):
        raise InvalidInputError("ray direction must be non-zero")
    return d / norm


def ray_box_t(origin, direction, center, rotation, half) -> np.ndarray:
    """Vectorized slab test; ``direction`` must be unit length. inf where missed."""
    o = np.einsum("...j,jk->...k", np.asarray(origin) - center, rotation)
    d = np.einsum("...j,jk->...k", direction, rotation)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    t_near = np.nanmax(np.fmin(t1, t2), axis=-1)
    t_far = np.nanmin(np.fmax(t1, t2), axis=-1)
    hit = t_far >= np.maximum(t_near, 0.0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def ray_capsule_t(origin, direction, a, b, radius: float) -> np.ndarray:
    """Vectorized ray/capsule entry distance; ``direction`` unit length. inf where missed.

    Returns 0 where the origin is already inside the capsule.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ba = b - a
    oa = o - a
    baba = np.sum(ba * ba, axis=-1)
    bard = np.sum(ba * d, axis=-1)
    baoa = np.sum(ba * oa, axis=-1)
    rdoa = np.sum(d * oa, axis=-1)
    oaoa = np.sum(oa * oa, axis=-1)
    r2 = radius * radius

    # origin inside: distance from origin to the axis segment <= r
    u = np.clip(baoa / np.where(baba > 0, baba, 1.0), 0.0, 1.0)
    closest = a + u[..., None] * ba
    inside = np.sum((o - closest) ** 2, axis=-1) <= r2

    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r2 * baba
    h = qb * qb - qa * qc
    t = np.full(np.broadcast(qa, qb).shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_body = (-qb - np.sqrt(np.maximum(h, 0.0))) / qa
        y = baoa + t_body * bard
        body = (h >= 0) & (qa > _EPS * np.maximum(baba, 1.0)) & (y > 0) & (y < baba)
        t = np.where(body, t_body, t)
        # end caps: test both spheres, keep the nearest entry
        for end in (a, b):
            oc = o - end
            sb = np.sum(d * oc, axis=-1)
            sc = np.sum(oc * oc, axis=-1) - r2
            sh = sb * sb - sc
            t_cap = -sb - np.sqrt(np.maximum(sh, 0.0))
            t = np.where((sh >= 0) & (t_cap < t) & ~body, t_cap, t)
    # entry behind the origin means the capsule is behind us (origin not inside)
    t = np.where(t < 0, np.inf, t)
    return np.where(inside, 0.0, t)


def ray_box_intersect(origin, direction, box) -> float | None:
    """Nearest non-negative hit distance against ``box = (center, half_extents[, rotation])``."""
    center, half, *rest = box
    rotation = rest[0] if rest else np.eye(3)
    t = float(ray_box_t(np.asarray(origin, float), _unit(direction), np.asarray(center, float),
                        np.asarray(rotation, float), np.asarray(half, float)))
    return None if np.isinf(t) else t


def ray_capsule_intersect(origin, direction, capsule) -> float | None:
    """Nearest non-negative hit distance against ``capsule = (a, b, radius)``."""
    a, b, radius = capsule
    t = float(ray_capsule_t(np.asarray(origin, float), _unit(direction), a, b, float(radius)))
    return None if np.isinf(t) else t


# -- occlusion ------------------------------------------------------------------------

def _blocker_mask() -> np.ndarray:
    """8 tracked bones x 12 capsules; True where the capsule may occlude the bone."""
    mask = np.ones((8, 12), dtype=bool)
    for f in range(4):
        for k in range(2):
            for nb in (k - 1, k, k + 1):
                if 0 <= nb < 3:
                    mask[2 * f + k, 3 * f + nb] = False
    return mask


BLOCKERS = _blocker_mask()


def occlusion_flags(camera_position, geometry: HandGeometry) -> np.ndarray:
    """T x 8 boolean flags for every tracked bone of every frame."""
    cam = np.asarray(camera_position, dtype=np.float64)
    targets = geometry.bones.tracked_midpoints()  # T x 8 x 3
    delta = targets - cam
    dist = np.linalg.norm(delta, axis=-1)  # T x 8
    d = delta / dist[..., None]
    limit = dist * (1.0 - 1e-9)

    t_box = ray_box_t(cam, d, geometry.box_center, geometry.box_rotation, geometry.box_half)
    blocked = t_box < limit

    T = len(targets)
    a = geometry.bones.start.reshape(T, 1, 12, 3)
    b = geometry.bones.end.reshape(T, 1, 12, 3)
    t_cap = ray_capsule_t(cam, d[:, :, None, :], a, b, geometry.radius)  # T x 8 x 12
    hit = (t_cap < limit[..., None]) & BLOCKERS[None]
    return blocked | hit.any(axis=-1)


def bone_occluded(camera_position, bone: int, geometry: HandGeometry, frame: int = 0) -> bool:
    """Occlusion of one tracked bone (0..7, joint order) in one frame."""
    if not 0 <= bone < 8:
        raise InvalidInputError("bone index must be in 0..7")
    single = HandGeometry(geometry.box_center, geometry.box_rotation, geometry.box_half,
                          BoneFrames(geometry.bones.start[frame:frame + 1], geometry.bones.end[frame:frame + 1]),
                          geometry.radius)
    return bool(occlusion_flags(camera_position, single)[0, bone])


def occlusion_fraction(flags) -> dict[str, float]:
    """Percent of ticks flagged, per finger (MCP and PIP bones pooled) and overall."""
    f = np.asarray(flags, dtype=bool)
    if f.ndim != 2 or f.shape[1] != 8:
        raise InvalidInputError("flags must be T x 8")
    if f.size == 0:
        return {name: 0.0 for name in (*FINGERS, "overall")}
    out = {name: 100.0 * float(f[:, 2 * i:2 * i + 2].mean()) for i, name in enumerate(FINGERS)}
    out["overall"] = 100.0 * float(f.mean())
    return out


# -- cameras ------------------------------------------------------------------------

def look_at_quat(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Orientation whose local -z axis points from ``position`` to ``target``."""
    fwd = np.asarray(target, float) - np.asarray(position, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    return matrix_to_quat(np.column_stack([right, true_up, -fwd]))


def camera_position(skeleton: HandSkeleton, distance: float, elevation_deg: float, azimuth_deg: float,
                    root: RootPose | None = None) -> np.ndarray:
    """Camera on a sphere around the palm centre. Azimuth 0 looks from the fingertip
    side, 180 from behind the wrist; elevation is measured from the palm plane
    toward the back of the hand."""
    e, az = np.radians(elevation_deg), np.radians(azimuth_deg)
    offset = distance * np.array([np.cos(e) * np.cos(az), np.cos(e) * np.sin(az), np.sin(e)])
    local = skeleton.palm_center + offset
    return (root or RootPose()).apply(local)
