import math

import numpy as np
import pytest

from advtex import autodiff as ad
from advtex import geometry as geo


# -- spherical pose ----------------------------------------------------------


def test_to_pose_pole():
    st = geo.to_pose(geo.SphericalPose(1.0, 0.0, 0.0), np.zeros(3))
    assert np.allclose(st.p, [0.0, 0.0, 1.0])
    assert np.allclose(st.approach(), [0.0, 0.0, -1.0])


def test_to_pose_equator():
    st = geo.to_pose(geo.SphericalPose(2.0, math.pi / 2, math.pi / 2), np.zeros(3))
    assert np.allclose(st.p, [0.0, 2.0, 0.0], atol=1e-12)


def test_to_pose_oblique():
    st = geo.to_pose(geo.SphericalPose(0.5, math.pi / 4, math.pi / 4), np.array([1.0, 0.0, 0.0]))
    assert np.allclose(st.p, [1.25, 0.25, 0.3536], atol=1e-4)


def test_to_pose_aims_at_center_and_is_orthonormal():
    rng = np.random.default_rng(7)
    for _ in range(200):
        tau = geo.SphericalPose(
            r=rng.uniform(0.25, 0.8),
            theta=rng.uniform(0, 2 * math.pi),
            phi=rng.uniform(0, math.radians(75)),
        )
        center = rng.uniform(-0.5, 0.5, 3)
        st = geo.to_pose(tau, center)
        assert abs(np.linalg.norm(st.p - center) - tau.r) < 1e-9
        # approach axis points from the pose back at the center
        assert np.allclose(st.approach() * tau.r, center - st.p, atol=1e-9)
        assert np.abs(st.R.T @ st.R - np.eye(3)).max() < 1e-9
        assert np.linalg.det(st.R) > 0.999


def test_pose_validation():
    with pytest.raises(ValueError):
        geo.SphericalPose(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        geo.SphericalPose(1.0, 0.0, math.pi * 0.75)


# -- kinematics --------------------------------------------------------------


def test_apply_action_identity():
    st = geo.to_pose(geo.SphericalPose(0.5, 0.3, 0.4), np.zeros(3))
    nxt = geo.apply_action(st, np.zeros(6))
    assert np.allclose(nxt.p, st.p)
    assert np.allclose(nxt.R, st.R)


def test_apply_action_pure_translation():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    nxt = geo.apply_action(st, np.array([0.01, 0, 0, 0, 0, 0]))
    assert np.allclose(nxt.p, [0.01, 0.0, 0.0])


def test_apply_action_translation_clamp():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    nxt = geo.apply_action(st, np.array([1.0, 0, 0, 0, 0, 0]))
    assert np.allclose(nxt.p, [geo.STEP_MAX, 0.0, 0.0])


def test_apply_action_ee_frame_translation():
    # with the EE rotated 90 deg about z, a local +x step moves along world +y
    st = geo.EEState(p=np.zeros(3), R=geo.yaw_matrix(math.pi / 2))
    nxt = geo.apply_action(st, np.array([0.01, 0, 0, 0, 0, 0]))
    assert np.allclose(nxt.p, [0.0, 0.01, 0.0], atol=1e-12)


def test_apply_action_rotation_about_z():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    # rot_max clamps pi/2 to 0.1 rad, so request it in clamped-size slices
    for _ in range(100):
        st = geo.apply_action(st, np.array([0, 0, 0, 0, 0, math.pi / 200]))
    expect = geo.rodrigues(np.array([0, 0, math.pi / 2]))
    assert np.abs(st.R - expect).max() < 1e-9


def test_apply_action_rotation_clamp():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    nxt = geo.apply_action(st, np.array([0, 0, 0, 0, 0, 3.0]))
    assert abs(geo.rotation_angle(np.eye(3), nxt.R) - geo.ROT_MAX) < 1e-9


def test_apply_action_rejects_nonfinite():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    with pytest.raises(ValueError):
        geo.apply_action(st, np.array([np.nan, 0, 0, 0, 0, 0]))


def test_orthonormality_over_chained_actions():
    rng = np.random.default_rng(11)
    st = geo.to_pose(geo.SphericalPose(0.5, 1.0, 0.7), np.zeros(3))
    worst = 0.0
    for _ in range(10_000):
        st = geo.apply_action(st, rng.uniform(-0.2, 0.2, 6))
        worst = max(worst, np.abs(st.R.T @ st.R - np.eye(3)).max())
    assert worst < 1e-9


def test_heading_vectors_direct_substitution():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    v_ee, v_target = geo.heading_vectors(st, np.zeros(6), np.array([0.0, 0.0, -2.0]))
    assert np.allclose(v_ee, [0.0, 0.0, -1.0])
    assert np.allclose(v_target, [0.0, 0.0, -2.0])


def test_rotation_angle_bounds():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ra = geo.rodrigues(rng.normal(size=3))
        rb = geo.rodrigues(rng.normal(size=3))
        ang = geo.rotation_angle(ra, rb)
        assert 0.0 <= ang <= math.pi
    assert geo.rotation_angle(np.eye(3), np.eye(3)) == 0.0


# -- differentiable motion twin ----------------------------------------------


def _random_state(rng):
    return geo.to_pose(
        geo.SphericalPose(
            rng.uniform(0.25, 0.8), rng.uniform(0, 2 * math.pi), rng.uniform(0, 1.3)
        ),
        rng.uniform(-0.3, 0.3, 3),
    )


def test_motion_graph_matches_apply_action():
    rng = np.random.default_rng(5)
    for _ in range(100):
        st = _random_state(rng)
        a = rng.uniform(-0.15, 0.15, 6)
        p_next, v_ee = geo.motion_graph(st, ad.Tensor(a, requires_grad=True))
        nxt = geo.apply_action(st, a)
        assert np.allclose(p_next.data, nxt.p, atol=1e-9)
        # re-orthonormalization perturbs the applied R by <1e-12
        assert np.allclose(v_ee.data, nxt.approach(), atol=1e-9)


def test_motion_graph_gradients():
    rng = np.random.default_rng(9)
    for _ in range(20):
        st = _random_state(rng)
        a0 = rng.uniform(-0.15, 0.15, 6)
        # keep clear of the clamp kinks at ||dp||=step_max, ||w||=rot_max
        if abs(np.linalg.norm(a0[:3]) - geo.STEP_MAX) < 5e-3:
            continue
        if abs(np.linalg.norm(a0[3:]) - geo.ROT_MAX) < 5e-3:
            continue
        target = rng.uniform(-0.3, 0.3, 3)

        def f(a):
            p_next, v_ee = geo.motion_graph(st, a)
            return ad.add(ad.l2norm(ad.sub(p_next, ad.Tensor(target))), ad.l2norm(v_ee))

        err = ad.grad_check(f, ad.Tensor(a0, requires_grad=True), eps=1e-5)
        assert err < 1e-4


def test_motion_graph_small_angle_branch():
    st = geo.EEState(p=np.zeros(3), R=np.eye(3))
    a = np.array([0.0, 0.0, 0.0, 1e-10, 0.0, 0.0])
    _, v_ee = geo.motion_graph(st, ad.Tensor(a, requires_grad=True))
    assert np.allclose(v_ee.data, [0.0, 1e-10, -1.0], atol=1e-12)


# -- meshes ------------------------------------------------------------------


def test_cuboid_topology():
    m = geo.gen_assets("cuboid", (0.06, 0.06, 0.12))
    assert len(m.vertices) == 8
    assert len(m.faces) == 12
    assert m.uv.min() >= 0.0 and m.uv.max() <= 1.0
    assert m.height == pytest.approx(0.12)


def test_icosphere_counts():
    m = geo.gen_assets("icosphere", (1, 0.05))
    assert len(m.faces) == 80
    m0 = geo.gen_assets("icosphere", (0, 0.05))
    assert len(m0.faces) == 20
    # all vertices on the sphere centered (0,0,r)
    d = np.linalg.norm(m.vertices - np.array([0, 0, 0.05]), axis=1)
    assert np.allclose(d, 0.05, atol=1e-12)


def test_thin_patch_uv_atlas():
    m = geo.gen_assets("thin_patch", (0.10, 0.10, 0.005))
    top = [i for i, f in enumerate(m.faces) if np.allclose(m.vertices[f][:, 2], 0.005)]
    rest = [i for i in range(len(m.faces)) if i not in top]
    assert len(top) == 2
    top_uv = m.uv[top].reshape(-1, 2)
    assert top_uv.min(axis=0) == pytest.approx([0.0, 0.0])
    assert top_uv.max(axis=0) == pytest.approx([1.0, 1.0])
    assert np.all(m.uv[rest] == 0.0)


def test_cylinder_valid():
    m = geo.gen_assets("cylinder", (0.035, 0.12))
    m.validate()
    assert m.height == pytest.approx(0.12)
    # closed: every edge shared by exactly two faces
    edges = {}
    for f in m.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[min(a, b), max(a, b)] = edges.get((min(a, b), max(a, b)), 0) + 1
    assert set(edges.values()) == {2}


def test_gen_assets_validity_over_seeded_dims():
    rng = np.random.default_rng(23)
    for _ in range(100):
        geo.gen_assets("cuboid", rng.uniform(0.02, 0.2, 3)).validate()
        geo.gen_assets("cylinder", rng.uniform(0.02, 0.2, 2)).validate()
        geo.gen_assets("icosphere", (rng.integers(0, 3), rng.uniform(0.02, 0.2))).validate()
        geo.gen_assets("thin_patch", rng.uniform(0.02, 0.2, 3)).validate()


def test_gen_assets_rejects_bad_input():
    with pytest.raises(ValueError):
        geo.gen_assets("cuboid", (0.0, 0.1, 0.1))
    with pytest.raises(ValueError):
        geo.gen_assets("torus", (0.1,))


def test_outward_normals():
    # face normals of convex solids must point away from an interior point
    for kind, dims in [("cuboid", (0.06, 0.06, 0.12)), ("cylinder", (0.04, 0.1)), ("icosphere", (1, 0.05))]:
        m = geo.gen_assets(kind, dims)
        inside = np.array([0.0, 0.0, m.height / 2])
        v = m.vertices
        for f in m.faces:
            n = np.cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])
            assert n @ (v[f].mean(axis=0) - inside) > 0


# -- scene sampling ----------------------------------------------------------


def test_sample_scene_deterministic():
    ws = geo.Workspace()
    a = geo.sample_scene(42, 0.5, ws)
    b = geo.sample_scene(42, 0.5, ws)
    assert np.allclose(a.goal_pos, b.goal_pos)
    assert np.allclose(a.adv_pos, b.adv_pos)
    assert a.ee_init == b.ee_init


def test_sample_scene_no_overlap():
    ws = geo.Workspace(n_distractors=2)
    for seed in range(50):
        cfg = geo.sample_scene(seed, 0.5, ws)
        pts = [cfg.goal_pos, cfg.adv_pos, *cfg.distractor_pos]
        radii = [ws.goal_radius, ws.adv_radius, ws.distractor_radius, ws.distractor_radius]
        for i in range(len(pts)):
            assert np.abs(pts[i][:2]).max() <= ws.half_extent - ws.margin
            for j in range(i + 1, len(pts)):
                gap = np.linalg.norm(pts[i][:2] - pts[j][:2])
                assert gap >= radii[i] + radii[j] + ws.clearance - 1e-12
        assert 0.0 <= cfg.ee_init.phi <= ws.phi_max
        assert cfg.ee_init.r == 0.5


def test_sample_scene_rejection_budget():
    ws = geo.Workspace(half_extent=0.1, margin=0.0, goal_radius=0.2, adv_radius=0.2)
    with pytest.raises(RuntimeError):
        geo.sample_scene(0, 0.5, ws)


def test_scene_roundtrip_dict():
    cfg = geo.sample_scene(7, 0.4, geo.Workspace())
    back = geo.scene_from_dict(geo.scene_to_dict(cfg))
    assert np.allclose(back.goal_pos, cfg.goal_pos)
    assert back.ee_init == cfg.ee_init
    assert back.config_id == cfg.config_id


# -- OBJ i/o -----------------------------------------------------------------


def test_obj_roundtrip(tmp_path):
    for kind, dims in [("cuboid", (0.06, 0.06, 0.12)), ("cylinder", (0.04, 0.1)), ("icosphere", (1, 0.05)), ("thin_patch", (0.1, 0.1, 0.005))]:
        m = geo.gen_assets(kind, dims)
        path = tmp_path / f"{kind}.obj"
        geo.save_obj(m, path)
        back = geo.load_obj(path)
        assert np.allclose(back.vertices, m.vertices, atol=1e-7)
        assert np.array_equal(back.faces, m.faces)
        assert np.allclose(back.uv, m.uv, atol=1e-7)
