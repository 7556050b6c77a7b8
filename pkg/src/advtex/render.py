"""Deterministic software rasterizer with exact texture gradients.

Forward path: world-space triangle assembly -> camera transform -> near-plane
clipping -> perspective projection -> z-buffered rasterization (compiled
kernel) -> perspective-correct UV interpolation -> bilinear texture sampling
modulated by per-face Lambertian shade.

The differentiable variant renders the adversarial object alone through the
*same* sampling helper, so its pixel values are bit-identical to the full
render wherever that object is the nearest hit; only the texture carries
gradients (geometry, visibility and shading are constants of the graph).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .geometry import TextureMap

# Fixed overhead light (unit direction toward the light) and shading law
# s = 0.3 + 0.7 * max(0, n . l): ambient floor keeps every face visible.
LIGHT_DIR = np.array([0.3, -0.25, 0.91])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)

BACKGROUND = np.array([0.55, 0.65, 0.80])
ZNEAR = 0.01

DEFAULT_COLORS = {
    "table": (0.75, 0.75, 0.75),
    "goal": (0.80, 0.10, 0.10),
    "adv": (0.50, 0.50, 0.50),
    "distractor": (0.10, 0.20, 0.80),
}


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.focal > 0):
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @staticmethod
    def square(size, focal=None):
        if focal is None:
            focal = 0.7 * size
        return CameraIntrinsics(size, size, float(focal), size / 2.0, size / 2.0)


# -- scene assembly ----------------------------------------------------------


@dataclass(frozen=True)
class ObjectSet:
    """Meshes for the four table-top roles."""

    table: geo.TriMesh
    goal: geo.TriMesh
    adv: geo.TriMesh
    distractor: geo.TriMesh


def _table_mesh(half_extent=0.5):
    h = half_extent
    v = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    uv = np.array(
        [[(0, 0), (1, 0), (1, 1)], [(0, 0), (1, 1), (0, 1)]], dtype=np.float64
    )
    return geo.TriMesh(v, f, uv).validate()


# default dimensions of the attackable object, by mesh kind
ADV_DIMS = {
    "cuboid": (0.07, 0.07, 0.14),
    "thin_patch": (0.07, 0.07, 0.005),
    "cylinder": (0.04, 0.14),
    "icosphere": (1, 0.05),
}


@lru_cache(maxsize=8)
def default_objects(adv_kind="cuboid"):
    """Standard desk-scale object set; ``adv_kind`` picks the attacked mesh."""
    adv_dims = ADV_DIMS[adv_kind]
    return ObjectSet(
        table=_table_mesh(),
        goal=geo.make_cylinder(0.035, 0.12, nseg=16),
        adv=geo.gen_assets(adv_kind, adv_dims),
        distractor=geo.make_cylinder(0.030, 0.08, nseg=12),
    )


def adv_center(objects, cfg):
    """Loss/τ anchor point of the adversarial object: its mid-height center."""
    return cfg.adv_pos + objects.adv.centroid_offset()


def goal_center(objects, cfg):
    return cfg.goal_pos + objects.goal.centroid_offset()


@dataclass(frozen=True)
class Scene:
    """World-space triangle soup ready for rasterization."""

    corners: np.ndarray  # (F, 3, 3) triangle corner positions
    uv: np.ndarray  # (F, 3, 2)
    shade: np.ndarray  # (F,) per-face Lambertian scalar
    owner: np.ndarray  # (F,) index into names
    names: tuple  # item names, e.g. ("table", "goal", "adv", "distractor0")
    texture_keys: tuple  # per item, role key into the texture dict


def build_scene(objects, cfg, include=None, exclude=()):
    """Place the object set per a scene configuration.

    include, when given, keeps only the named items (e.g. ("adv",) for the
    differentiable pass); exclude drops names (("adv",) for the simulator
    image of the hybrid composite).
    """
    items = [
        ("table", objects.table, 0.0, np.zeros(3), "table"),
        ("goal", objects.goal, cfg.goal_yaw, cfg.goal_pos, "goal"),
        ("adv", objects.adv, cfg.adv_yaw, cfg.adv_pos, "adv"),
    ]
    for i, (pos, yaw) in enumerate(zip(cfg.distractor_pos, cfg.distractor_yaw)):
        items.append((f"distractor{i}", objects.distractor, yaw, pos, "distractor"))
    if include is not None:
        items = [it for it in items if it[0] in include]
    items = [it for it in items if it[0] not in exclude]

    corners, uvs, shades, owners, names, keys = [], [], [], [], [], []
    for oi, (name, mesh, yaw, pos, key) in enumerate(items):
        r = geo.yaw_matrix(yaw)
        vw = mesh.vertices @ r.T + np.asarray(pos)
        c = vw[mesh.faces]
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        corners.append(c)
        uvs.append(mesh.uv)
        shades.append(0.3 + 0.7 * np.maximum(0.0, n @ LIGHT_DIR))
        owners.append(np.full(len(c), oi, dtype=np.int64))
        names.append(name)
        keys.append(key)
    return Scene(
        corners=np.concatenate(corners),
        uv=np.concatenate(uvs),
        shade=np.concatenate(shades),
        owner=np.concatenate(owners),
        names=tuple(names),
        texture_keys=tuple(keys),
    )


def scene_triplet(objects, cfg):
    """(full, without-adv, adv-only) scenes for the hybrid composite path."""
    return (
        build_scene(objects, cfg),
        build_scene(objects, cfg, exclude=("adv",)),
        build_scene(objects, cfg, include=("adv",)),
    )


def default_textures(adv_texture=None, size=4):
    """Benign role textures; ``adv_texture`` overrides the gray placeholder."""
    out = {k: TextureMap.uniform(size, size, c) for k, c in DEFAULT_COLORS.items()}
    if adv_texture is not None:
        out["adv"] = adv_texture
    return out


# -- projection and rasterization -------------------------------------------


def _clip_near(q, uv, znear):
    """Clip one camera-space triangle against depth >= znear; returns a fan."""
    keep, kuv = [], []
    for i in range(3):
        j = (i + 1) % 3
        da = -q[i, 2] - znear
        db = -q[j, 2] - znear
        if da >= 0.0:
            keep.append(q[i])
            kuv.append(uv[i])
        if (da >= 0.0) != (db >= 0.0):
            t = da / (da - db)
            keep.append(q[i] + t * (q[j] - q[i]))
            kuv.append(uv[i] + t * (uv[j] - uv[i]))
    tris = []
    for k in range(1, len(keep) - 1):
        tris.append(((keep[0], keep[k], keep[k + 1]), (kuv[0], kuv[k], kuv[k + 1])))
    return tris


def _project_scene(scene, ee, intr, znear):
    """Camera transform + near clip + perspective projection.

    Returns screen xy (T,3,2), depth (T,3), uv (T,3,2), shade (T,), owner (T,).
    """
    q = (scene.corners - ee.p) @ ee.R  # row form of R^T (x - p)
    d = -q[..., 2]
    front = d >= znear
    if front.all():
        qk, uvk, shk, owk = q, scene.uv, scene.shade, scene.owner
    else:
        keep = front.all(axis=1)
        cross = front.any(axis=1) & ~keep
        parts_q = [q[keep]]
        parts_uv = [scene.uv[keep]]
        parts_sh = [scene.shade[keep]]
        parts_ow = [scene.owner[keep]]
        for t in np.nonzero(cross)[0]:
            for tq, tuv in _clip_near(q[t], scene.uv[t], znear):
                parts_q.append(np.asarray(tq)[None])
                parts_uv.append(np.asarray(tuv)[None])
                parts_sh.append(scene.shade[t : t + 1])
                parts_ow.append(scene.owner[t : t + 1])
        qk = np.concatenate(parts_q) if parts_q else q[:0]
        uvk = np.concatenate(parts_uv) if parts_uv else scene.uv[:0]
        shk = np.concatenate(parts_sh)
        owk = np.concatenate(parts_ow)
        d = -qk[..., 2]
    xy = np.empty(qk.shape[:2] + (2,))
    xy[..., 0] = intr.cx + intr.focal * qk[..., 0] / d
    xy[..., 1] = intr.cy + intr.focal * qk[..., 1] / d
    return xy, d, uvk, shk, owk


def _raster_attrs(scene, ee, intr, znear):
    """Rasterize and return per-covered-pixel attributes.

    Returns (ys, xs, u, v, shade, owner, depth_map). u/v are
    perspective-correct texture coordinates at pixel centers.
    """
    xy, d, uv, shade, owner = _project_scene(scene, ee, intr, znear)
    tri, zbuf, bary = _kernels.raster_triangles(
        np.ascontiguousarray(xy), np.ascontiguousarray(d), intr.height, intr.width
    )
    ys, xs = np.nonzero(tri >= 0)
    t = tri[ys, xs]
    lam = bary[ys, xs]
    zpix = zbuf[ys, xs]
    w = lam / d[t]
    u = (w * uv[t, :, 0]).sum(axis=1) * zpix
    v = (w * uv[t, :, 1]).sum(axis=1) * zpix
    return ys, xs, u, v, shade[t], owner[t], zbuf


def _texel_cells(u, v, tex_h, tex_w):
    """Clamp-to-edge bilinear cells: UV (0,0) is the center of texel (0,0)."""
    tx = np.clip(u, 0.0, 1.0) * (tex_w - 1.0)
    ty = np.clip(v, 0.0, 1.0) * (tex_h - 1.0)
    ix0 = np.clip(np.floor(tx).astype(np.int64), 0, tex_w - 2)
    iy0 = np.clip(np.floor(ty).astype(np.int64), 0, tex_h - 2)
    return iy0, ix0, ty - iy0, tx - ix0


def _shaded_sample(tex_values, iy0, ix0, fy, fx, shade):
    vals = _kernels.bilinear_gather(tex_values, iy0, ix0, fy, fx)
    return vals * shade[:, None]


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    masks: dict  # item name -> (H, W) bool, pairwise disjoint
    depth: np.ndarray  # (H, W) meters, +inf background


def _texture_values(tex):
    if isinstance(tex, TextureMap):
        return tex.values
    if isinstance(tex, Tensor):
        return tex.data
    return np.asarray(tex, dtype=np.float64)


def rasterize(scene, ee, intr, textures, background=BACKGROUND, znear=ZNEAR):
    """Render the scene from the wrist camera (camera frame = EE frame).

    scene may be a prebuilt Scene or a SceneConfig (assembled on the fly
    with the default object set). textures maps role keys to TextureMap.
    """
    if isinstance(scene, geo.SceneConfig):
        scene = build_scene(default_objects(), scene)
    ys, xs, u, v, shade, owner, zbuf = _raster_attrs(scene, ee, intr, znear)
    img = np.tile(np.asarray(background, dtype=np.float64), (intr.height, intr.width, 1))
    masks = {}
    for oi, name in enumerate(scene.names):
        sel = owner == oi
        mask = np.zeros((intr.height, intr.width), dtype=bool)
        if sel.any():
            tv = _texture_values(textures[scene.texture_keys[oi]])
            iy0, ix0, fy, fx = _texel_cells(u[sel], v[sel], tv.shape[0], tv.shape[1])
            img[ys[sel], xs[sel]] = _shaded_sample(tv, iy0, ix0, fy, fx, shade[sel])
            mask[ys[sel], xs[sel]] = True
        masks[name] = mask
    return RenderOutput(image=img, masks=masks, depth=zbuf)


# -- differentiable pass -----------------------------------------------------


def texture_pixels(tex, iy0, ix0, fy, fx, shade):
    """Graph op: shaded bilinear texture samples for P pixels -> (P, 3).

    d(pixel)/d(texel) is the bilinear weight times the face shade; cell
    indices, fractions and shade are constants.
    """
    data = _shaded_sample(tex.data, iy0, ix0, fy, fx, shade)
    th, tw = tex.data.shape[0], tex.data.shape[1]

    def backward(g):
        if tex.requires_grad:
            gpix = np.ascontiguousarray(g * shade[:, None])
            tex.accum_grad(_kernels.bilinear_scatter(gpix, iy0, ix0, fy, fx, th, tw))

    return Tensor._make(data, (tex,), backward)


def pixels_to_image(pix, ys, xs, base):
    """Graph op: place per-pixel rows into a constant base image."""
    data = np.array(base, dtype=np.float64, copy=True)
    data[ys, xs] = pix.data

    def backward(g):
        if pix.requires_grad:
            pix.accum_grad(g[ys, xs])

    return Tensor._make(data, (pix,), backward)


def rasterize_diff(adv_scene, ee, intr, texture, background=BACKGROUND, znear=ZNEAR):
    """Differentiable render of the adversarial object alone.

    texture is a Tensor leaf (H_T, W_T, 3). Returns (RenderOutput, image
    tensor); the tensor's forward values equal the plain rasterize values
    bit-exactly wherever this object wins the full-scene depth test.
    """
    if len(adv_scene.names) != 1:
        raise ValueError("rasterize_diff expects a single-object scene")
    ys, xs, u, v, shade, _, zbuf = _raster_attrs(adv_scene, ee, intr, znear)
    iy0, ix0, fy, fx = _texel_cells(u, v, texture.data.shape[0], texture.data.shape[1])
    pix = texture_pixels(texture, iy0, ix0, fy, fx, shade)
    base = np.tile(np.asarray(background, dtype=np.float64), (intr.height, intr.width, 1))
    img_t = pixels_to_image(pix, ys, xs, base)
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    mask[ys, xs] = True
    out = RenderOutput(image=img_t.data, masks={adv_scene.names[0]: mask}, depth=zbuf)
    return out, img_t


def composite(i_sim, i_diff, m_adv):
    """Hybrid image: (1 - M) * simulator render + M * differentiable render.

    Gradients flow through i_diff only. i_diff may be a Tensor (graph mode)
    or a plain array.
    """
    i_sim = np.asarray(i_sim, dtype=np.float64)
    shape_d = i_diff.shape if isinstance(i_diff, Tensor) else np.shape(i_diff)
    if i_sim.shape != shape_d or i_sim.shape[:2] != np.shape(m_adv):
        raise ValueError(
            f"composite shape mismatch: sim {i_sim.shape}, diff {shape_d}, "
            f"mask {np.shape(m_adv)}"
        )
    m3 = np.repeat(np.asarray(m_adv, dtype=np.float64)[:, :, None], 3, axis=2)
    sim_part = (1.0 - m3) * i_sim
    if isinstance(i_diff, Tensor):
        return ad.add(Tensor(sim_part), ad.mul(i_diff, Tensor(m3)))
    return sim_part + m3 * np.asarray(i_diff, dtype=np.float64)


# -- perturbations -----------------------------------------------------------


def perturb(image, kind, magnitude, seed=0, masks=None):
    """Simple robustness perturbations applied to a rendered image.

    brighten/dim scale by (1 +/- magnitude); gaussian_noise adds
    N(0, magnitude^2) per channel; background_swap repaints pixels outside
    all object masks with the gray level ``magnitude``. All outputs are
    clipped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if kind in ("brighten", "dim"):
        if not (0.0 <= magnitude <= 1.0):
            raise ValueError(f"{kind} magnitude must be in [0, 1], got {magnitude}")
        f = 1.0 + magnitude if kind == "brighten" else 1.0 - magnitude
        return np.clip(image * f, 0.0, 1.0)
    if kind == "gaussian_noise":
        if magnitude < 0.0:
            raise ValueError(f"noise magnitude must be >= 0, got {magnitude}")
        rng = np.random.default_rng(seed)
        return np.clip(image + rng.normal(0.0, magnitude, image.shape), 0.0, 1.0)
    if kind == "background_swap":
        if masks is None:
            raise ValueError("background_swap needs the per-object masks")
        if not (0.0 <= magnitude <= 1.0):
            raise ValueError(f"background gray level must be in [0, 1], got {magnitude}")
        union = np.zeros(image.shape[:2], dtype=bool)
        for m in masks.values():
            union |= m
        out = image.copy()
        out[~union] = magnitude
        return out
    raise ValueError(f"unknown perturbation kind: {kind!r}")


# -- image and texture i/o ---------------------------------------------------


def save_ppm(image, path):
    """8-bit binary PPM (P6)."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().split()[0]
        if magic != b"P6":
            raise ValueError(f"not a binary PPM file: {path}")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if line.startswith(b"#"):
                continue
            fields += line.split()
        w, h, maxv = (int(x) for x in fields)
        arr = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return arr.reshape(h, w, 3).astype(np.float64) / maxv


def save_texture(tex, stem):
    """Write <stem>.ppm (preview) and <stem>.npy (lossless float sidecar)."""
    values = _texture_values(tex)
    stem = str(stem)
    save_ppm(values, stem + ".ppm")
    np.save(stem + ".npy", values)


def load_texture(stem):
    return TextureMap(np.load(str(stem) + ".npy")).validate()
