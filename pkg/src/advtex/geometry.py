"""Scene geometry: meshes with per-corner UVs, spherical relative poses,
end-effector kinematics, and procedural table-top asset generation.

Conventions
- World frame: table surface is the z=0 plane, z up. Object meshes have
  their origin at the base center, so an object "position" is where it sits.
- End-effector frame: the approach axis (the direction the wrist camera
  looks along) is the local -z axis; actions are expressed in this frame.
- A spherical pose (r, theta, phi) places the end-effector at distance r
  from a center point, azimuth theta, polar angle phi (phi=0 straight
  above), with the approach axis aimed at the center.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


# -- rotations ---------------------------------------------------------------


def skew(v):
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


def rodrigues(w):
    """Rotation matrix for an axis-angle 3-vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def reorthonormalize(r):
    """Nearest rotation matrix (polar projection via SVD)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def rotation_angle(ra, rb):
    """Geodesic angle in [0, pi] between two rotation matrices."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# -- poses and state ---------------------------------------------------------

# Per-step action box: 2 cm translation, 0.1 rad rotation. Sized so a
# 60-step episode can cross the 1 m workspace.
STEP_MAX = 0.02
ROT_MAX = 0.1


@dataclass(frozen=True)
class SphericalPose:
    r: float
    theta: float
    phi: float

    def __post_init__(self):
        if not (self.r > 0.0):
            raise ValueError(f"spherical pose needs r > 0, got {self.r}")
        if not (0.0 <= self.phi <= np.pi / 2):
            raise ValueError(f"polar angle must lie in [0, pi/2], got {self.phi}")


@dataclass(frozen=True)
class EEState:
    p: np.ndarray
    R: np.ndarray

    def approach(self):
        """World-frame approach axis (local -z)."""
        return -self.R[:, 2]


@dataclass(frozen=True)
class Action6:
    """EE-frame delta pose: translation (m) and axis-angle rotation (rad)."""

    dp: np.ndarray
    drot: np.ndarray

    @property
    def vec(self):
        return np.concatenate([self.dp, self.drot])

    @staticmethod
    def from_vec(v):
        v = np.asarray(v, dtype=np.float64)
        return Action6(dp=v[:3].copy(), drot=v[3:6].copy())


def _action_vec(action):
    if isinstance(action, Action6):
        return action.vec
    return np.asarray(action, dtype=np.float64)


def to_pose(tau, center):
    """End-effector pose on the sphere around ``center``, aimed at it."""
    center = np.asarray(center, dtype=np.float64)
    st, ct = np.sin(tau.theta), np.cos(tau.theta)
    sp, cp = np.sin(tau.phi), np.cos(tau.phi)
    radial = np.array([sp * ct, sp * st, cp])
    p = center + tau.r * radial
    z_col = radial  # approach = -z points back at the center
    ref = np.array([1.0, 0.0, 0.0])
    if abs(z_col @ ref) > 0.999:
        ref = np.array([0.0, 1.0, 0.0])
    x_col = ref - (ref @ z_col) * z_col
    x_col /= np.linalg.norm(x_col)
    y_col = np.cross(z_col, x_col)
    return EEState(p=p, R=np.column_stack([x_col, y_col, z_col]))


def apply_action(state, action, step_max=STEP_MAX, rot_max=ROT_MAX):
    """Advance the end-effector by one clamped EE-frame action.

    action is a 6-vector: translation (m) then axis-angle rotation (rad),
    both in the end-effector frame. Translation norm is clamped to
    step_max, rotation angle to rot_max; the rotation is re-orthonormalized
    afterwards.
    """
    action = _action_vec(action)
    if not np.isfinite(action).all():
        raise ValueError("non-finite action")
    dp = action[:3].copy()
    n = float(np.linalg.norm(dp))
    if n > step_max:
        dp *= step_max / n
    w = action[3:6].copy()
    a = float(np.linalg.norm(w))
    if a > rot_max:
        w *= rot_max / a
    r_new = reorthonormalize(state.R @ rodrigues(w))
    return EEState(p=state.p + state.R @ dp, R=r_new)


def heading_vectors(state, action, p_adv, step_max=STEP_MAX, rot_max=ROT_MAX):
    """Post-action heading and the vector from the intended position to p_adv.

    Neither vector is normalized. ||v_target|| below 1e-9 means the
    end-effector would sit on the object; callers drop the orientation
    term then.
    """
    nxt = apply_action(state, action, step_max, rot_max)
    return nxt.approach(), np.asarray(p_adv, dtype=np.float64) - nxt.p


# Differentiable twin of apply_action's intended-pose outputs. Kept next to
# the plain version so the two clamp/rotation formulas stay in sync.

_APPROACH_LOCAL = np.array([0.0, 0.0, -1.0])
_CROSS_APPROACH = -skew(_APPROACH_LOCAL)  # w x e as a matrix acting on w


def motion_graph(state, action, step_max=STEP_MAX, rot_max=ROT_MAX):
    """Graph version of the intended motion: (p_next, v_ee) tensors.

    ``action`` is a 6-element tensor (policy output, gradients attached);
    the current state is a constant. Matches apply_action numerically up to
    its final re-orthonormalization.
    """
    dp = action[0:3]
    w = action[3:6]
    scale = ad.div(Tensor(float(step_max)), ad.maximum(ad.l2norm(dp), step_max))
    p_next = ad.add(Tensor(state.p), ad.matmul(Tensor(state.R), ad.mul(dp, scale)))

    wnorm = ad.l2norm(w)
    rscale = ad.div(Tensor(float(rot_max)), ad.maximum(wnorm, rot_max))
    wl = ad.mul(w, rscale)
    theta = ad.mul(wnorm, rscale)
    e = Tensor(_APPROACH_LOCAL)
    wxe = ad.matmul(Tensor(_CROSS_APPROACH), wl)
    if theta.item() < 1e-8:
        v_local = ad.add(e, wxe)  # first-order rotation
    else:
        axis = ad.div(wl, theta)
        ct, st = ad.cos(theta), ad.sin(theta)
        along = ad.mul(axis, ad.mul(ad.dot(axis, e), ad.sub(Tensor(1.0), ct)))
        v_local = ad.add(ad.add(ad.mul(e, ct), ad.mul(ad.div(wxe, theta), st)), along)
    v_ee = ad.matmul(Tensor(state.R), v_local)
    return p_next, v_ee


# -- textures ----------------------------------------------------------------


@dataclass
class TextureMap:
    """Optimizable surface color grid: (H, W, 3) values in [0, 1].

    Addressing convention (shared with the renderer): UV (0,0) maps to the
    center of texel (0,0), UV (1,1) to the center of texel (H-1, W-1),
    clamp-to-edge outside. Minimum size 2x2 so bilinear cells exist.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def validate(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] != 3 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"texture must be (H>=2, W>=2, 3), got {v.shape}")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("texture values must be finite and in [0, 1]")
        return self

    @staticmethod
    def uniform(height, width, color):
        color = np.broadcast_to(np.asarray(color, dtype=np.float64), (3,))
        vals = np.tile(color, (height, width, 1))
        return TextureMap(vals).validate()

    @staticmethod
    def random(height, width, seed):
        rng = np.random.default_rng(seed)
        return TextureMap(rng.uniform(0.0, 1.0, (height, width, 3))).validate()


# -- meshes ------------------------------------------------------------------


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) meters, object frame
    faces: np.ndarray  # (F, 3) vertex indices
    uv: np.ndarray  # (F, 3, 2) per-corner UVs in [0, 1]^2

    def validate(self):
        v, f, uv = self.vertices, self.faces, self.uv
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        if uv.min() < -1e-12 or uv.max() > 1.0 + 1e-12:
            raise ValueError("UV outside [0,1]^2")
        a = v[f[:, 1]] - v[f[:, 0]]
        b = v[f[:, 2]] - v[f[:, 0]]
        areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
        if (areas <= 1e-12).any():
            raise ValueError("degenerate triangle (area <= 1e-12 m^2)")
        return self

    @property
    def height(self):
        return float(self.vertices[:, 2].max())

    def centroid_offset(self):
        """Reference point of the object relative to its position: mid-height."""
        return np.array([0.0, 0.0, self.height / 2.0])


def _box_mesh(sx, sy, sz, face_uv):
    hx, hy = sx / 2.0, sy / 2.0
    v = np.array(
        [
            [-hx, -hy, 0.0], [hx, -hy, 0.0], [hx, hy, 0.0], [-hx, hy, 0.0],
            [-hx, -hy, sz], [hx, -hy, sz], [hx, hy, sz], [-hx, hy, sz],
        ]
    )
    # outward-wound faces: bottom, top, -y, +x, +y, -x
    quads = [
        (0, 3, 2, 1), (4, 5, 6, 7),
        (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7),
    ]
    faces, uv = [], []
    for qi, (a, b, c, d) in enumerate(quads):
        corners = face_uv(qi)  # 4 UV pairs for corners a,b,c,d
        faces.append((a, b, c))
        uv.append((corners[0], corners[1], corners[2]))
        faces.append((a, c, d))
        uv.append((corners[0], corners[2], corners[3]))
    return TriMesh(v, np.array(faces, dtype=np.int64), np.array(uv, dtype=np.float64)).validate()


def make_cuboid(sx, sy, sz):
    """Box with each of the 6 faces in its own cell of a 3x2 UV grid."""
    _require_positive(sx, sy, sz)

    def face_uv(qi):
        cu, cv = qi % 3, qi // 3
        u0, v0 = cu / 3.0, cv / 2.0
        u1, v1 = (cu + 1) / 3.0, (cv + 1) / 2.0
        return [(u0, v0), (u1, v0), (u1, v1), (u0, v1)]

    return _box_mesh(sx, sy, sz, face_uv)


def make_thin_patch(sx, sy, sz=0.005):
    """Flat cuboid whose whole UV atlas belongs to the top face.

    Side and bottom faces collapse to the (0,0) border texel, so texture
    optimization only ever paints the top surface: the 2D-patch baseline.
    """
    _require_positive(sx, sy, sz)

    def face_uv(qi):
        if qi == 1:  # top
            return [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        return [(0.0, 0.0)] * 4

    mesh = _box_mesh(sx, sy, sz, face_uv)
    # validate() already ran geometric checks; pinned UVs are intentional
    return mesh


def make_cylinder(radius, height, nseg=16):
    """Closed cylinder; sides unwrap to the lower UV band, caps are discs above."""
    _require_positive(radius, height)
    ang = 2.0 * np.pi * np.arange(nseg) / nseg
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.concatenate([ring, np.zeros((nseg, 1))], axis=1)
    top = np.concatenate([ring, np.full((nseg, 1), height)], axis=1)
    v = np.concatenate([bottom, top, [[0, 0, 0]], [[0, 0, height]]])
    ib, it = 2 * nseg, 2 * nseg + 1
    faces, uv = [], []
    for i in range(nseg):
        j = (i + 1) % nseg
        u0, u1 = i / nseg, (i + 1) / nseg
        # side quad (outward)
        faces.append((i, j, nseg + j))
        uv.append(((u0, 0.0), (u1, 0.0), (u1, 0.5)))
        faces.append((i, nseg + j, nseg + i))
        uv.append(((u0, 0.0), (u1, 0.5), (u0, 0.5)))
        # caps: bottom wound downward, top upward
        faces.append((ib, j, i))
        uv.append(_disc_uv(0.25, ang[[0, (i + 1) % nseg, i]]))
        faces.append((it, nseg + i, nseg + j))
        uv.append(_disc_uv(0.75, ang[[0, i, (i + 1) % nseg]]))
    return TriMesh(v, np.array(faces, dtype=np.int64), np.array(uv, dtype=np.float64)).validate()


def _disc_uv(cu, angles):
    out = [(cu, 0.75)]
    for a in angles[1:]:
        out.append((cu + 0.22 * np.cos(a), 0.75 + 0.22 * np.sin(a)))
    return out


def make_icosphere(subdiv, radius):
    """Icosahedron subdivided ``subdiv`` times (20 * 4^s triangles), base at z=0."""
    _require_positive(radius)
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdiv):
        verts = list(map(tuple, v))
        index = {vv: i for i, vv in enumerate(verts)}

        def midpoint(i, j):
            m = v[i] + v[j]
            m /= np.linalg.norm(m)
            key = tuple(m)
            if key not in index:
                index[key] = len(verts)
                verts.append(key)
            return index[key]

        newf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            newf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        v = np.array(verts, dtype=np.float64)
        f = np.array(newf, dtype=np.int64)

    normals = v.copy()
    v = v * radius
    v[:, 2] += radius  # base on the table plane
    uv = np.empty((len(f), 3, 2))
    for i, face in enumerate(f):
        us = np.arctan2(normals[face, 1], normals[face, 0]) / (2.0 * np.pi) + 0.5
        if us.max() - us.min() > 0.5:  # wrap at the seam
            us = np.where(us < 0.5, us + 1.0, us)
            us = np.minimum(us, 1.0)
        vs = np.arccos(np.clip(normals[face, 2], -1.0, 1.0)) / np.pi
        uv[i] = np.stack([us, vs], axis=1)
    return TriMesh(v, f, uv).validate()


def gen_assets(kind, dims, uv_scheme=None):
    """Procedural mesh factory: cuboid, cylinder, icosphere or thin_patch.

    uv_scheme overrides the per-kind default texture layout: "grid"
    (3x2 face atlas) or "top_only" (whole atlas on the top face) for the
    box kinds.
    """
    if kind == "cuboid":
        if uv_scheme == "top_only":
            return make_thin_patch(*dims)
        return make_cuboid(*dims)
    if kind == "cylinder":
        return make_cylinder(*dims)
    if kind == "icosphere":
        subdiv, radius = dims
        return make_icosphere(int(subdiv), radius)
    if kind == "thin_patch":
        if uv_scheme == "grid":
            return make_cuboid(*dims)
        return make_thin_patch(*dims)
    raise ValueError(f"unknown asset kind: {kind!r}")


def _require_positive(*dims):
    for d in dims:
        if not (d > 0):
            raise ValueError(f"dimensions must be positive, got {dims}")


# -- scene sampling ----------------------------------------------------------


@dataclass(frozen=True)
class Workspace:
    """Table extent and placement/clearance parameters."""

    half_extent: float = 0.5
    margin: float = 0.08
    clearance: float = 0.03
    goal_radius: float = 0.05
    adv_radius: float = 0.06
    distractor_radius: float = 0.04
    n_distractors: int = 1
    phi_max: float = np.deg2rad(75.0)


@dataclass(frozen=True)
class SceneConfig:
    config_id: int
    seed: int
    goal_pos: np.ndarray
    goal_yaw: float
    adv_pos: np.ndarray
    adv_yaw: float
    distractor_pos: tuple
    distractor_yaw: tuple
    ee_init: SphericalPose


def sample_scene(seed, r, workspace, config_id=0):
    """Rejection-sample non-overlapping table placements plus an initial
    end-effector pose at distance ``r`` from the adversarial object."""
    rng = np.random.default_rng(seed)
    lim = workspace.half_extent - workspace.margin
    radii = (
        [workspace.goal_radius, workspace.adv_radius]
        + [workspace.distractor_radius] * workspace.n_distractors
    )
    placed = []
    budget = 1000
    for ri in radii:
        while True:
            if budget == 0:
                raise RuntimeError("scene placement rejection budget exhausted")
            budget -= 1
            pos = rng.uniform(-lim, lim, 2)
            if all(
                np.linalg.norm(pos - q) >= ri + rj + workspace.clearance
                for q, rj in placed
            ):
                placed.append((pos, ri))
                break
    yaws = rng.uniform(0.0, 2.0 * np.pi, len(radii))
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phi = rng.uniform(0.0, workspace.phi_max)
    to3 = lambda q: np.array([q[0], q[1], 0.0])
    return SceneConfig(
        config_id=config_id,
        seed=seed,
        goal_pos=to3(placed[0][0]),
        goal_yaw=float(yaws[0]),
        adv_pos=to3(placed[1][0]),
        adv_yaw=float(yaws[1]),
        distractor_pos=tuple(to3(p) for p, _ in placed[2:]),
        distractor_yaw=tuple(float(y) for y in yaws[2:]),
        ee_init=SphericalPose(r=r, theta=theta, phi=phi),
    )


def scene_to_dict(cfg):
    return {
        "config_id": cfg.config_id,
        "seed": cfg.seed,
        "goal_pos": list(cfg.goal_pos),
        "goal_yaw": cfg.goal_yaw,
        "adv_pos": list(cfg.adv_pos),
        "adv_yaw": cfg.adv_yaw,
        "distractor_pos": [list(p) for p in cfg.distractor_pos],
        "distractor_yaw": list(cfg.distractor_yaw),
        "ee_init": {"r": cfg.ee_init.r, "theta": cfg.ee_init.theta, "phi": cfg.ee_init.phi},
    }


def scene_from_dict(d):
    return SceneConfig(
        config_id=d["config_id"],
        seed=d["seed"],
        goal_pos=np.array(d["goal_pos"]),
        goal_yaw=d["goal_yaw"],
        adv_pos=np.array(d["adv_pos"]),
        adv_yaw=d["adv_yaw"],
        distractor_pos=tuple(np.array(p) for p in d["distractor_pos"]),
        distractor_yaw=tuple(d["distractor_yaw"]),
        ee_init=SphericalPose(**d["ee_init"]),
    )


# -- OBJ i/o -----------------------------------------------------------------


def save_obj(mesh, path):
    """ASCII OBJ with per-corner vt records (f v/vt triplets, 1-based)."""
    with open(path, "w") as fh:
        fh.write(f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face_uv in mesh.uv:
            for u in face_uv:
                fh.write(f"vt {u[0]:.9g} {u[1]:.9g}\n")
        for i, face in enumerate(mesh.faces):
            t = 3 * i + 1
            fh.write(
                f"f {face[0] + 1}/{t} {face[1] + 1}/{t + 1} {face[2] + 1}/{t + 2}\n"
            )


def load_obj(path):
    verts, vts, faces, uv = [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                vts.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                vi, ti = zip(*(p.split("/")[:2] for p in parts[1:4]))
                faces.append([int(x) - 1 for x in vi])
                uv.append([int(x) - 1 for x in ti])
    vts = np.array(vts)
    uv = np.array([[vts[t] for t in tri] for tri in uv])
    return TriMesh(
        np.array(verts), np.array(faces, dtype=np.int64), uv
    ).validate()
