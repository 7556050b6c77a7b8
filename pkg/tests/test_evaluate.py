"""Episode rollouts, metric arithmetic, oracle equality, and the sweeps."""

import json
import math

import numpy as np
import pytest

from advtex import attack as at
from advtex import evaluate as ev
from advtex import geometry as geo
from advtex import policy as pol
from advtex import render as rd

from conftest import constant_action_net, decoy_config, reachable_config


# -- run_episode --------------------------------------------------------------


def test_march_reaches_goal(march_net, small_intr):
    cfg = reachable_config(r=0.3)
    res = ev.run_episode(cfg, march_net, rd.default_textures(), intr=small_intr)
    assert res.reached_goal and not res.reached_adv
    # 0.3 m start, 0.02 m per step, success inside 0.05 m -> 13 steps
    assert res.steps == 13
    assert len(res.trajectory) == 13
    assert res.final_d_goal <= 0.05
    assert res.nearest == "goal"


def test_zero_action_times_out(small_intr):
    net = constant_action_net(np.zeros(6))
    cfg = reachable_config()
    res = ev.run_episode(cfg, net, rd.default_textures(), intr=small_intr)
    assert not res.reached_goal and not res.reached_adv
    assert res.steps == 60


def test_march_decoy_reaches_adv(march_net, small_intr):
    cfg = decoy_config()
    res = ev.run_episode(cfg, march_net, rd.default_textures(), intr=small_intr)
    assert res.reached_adv and not res.reached_goal
    assert res.final_d_adv <= 0.05
    assert res.nearest == "adv"


def test_episode_distance_bookkeeping(march_net, small_intr):
    # replay the logged trajectory and verify the final distances
    cfg = decoy_config()
    res = ev.run_episode(cfg, march_net, rd.default_textures(), intr=small_intr)
    objects = rd.default_objects()
    ee = geo.to_pose(cfg.ee_init, rd.adv_center(objects, cfg))
    for rec in res.trajectory:
        assert np.allclose(rec["p"], ee.p, atol=1e-12)
        ee = geo.apply_action(ee, np.asarray(rec["action"]))
    assert res.final_d_adv == pytest.approx(
        float(np.linalg.norm(ee.p - rd.adv_center(objects, cfg))), abs=1e-12
    )
    assert res.final_d_goal == pytest.approx(
        float(np.linalg.norm(ee.p - rd.goal_center(objects, cfg))), abs=1e-12
    )


def test_paired_actions_identical_textures(march_net, small_intr):
    tex = rd.default_textures()
    res = ev.run_episode(
        reachable_config(), march_net, tex, intr=small_intr, paired_textures=tex
    )
    for rec in res.trajectory:
        assert rec["paired_action"] == rec["action"]


def test_perturbed_episode_runs(march_net, small_intr):
    res = ev.run_episode(
        reachable_config(),
        march_net,
        rd.default_textures(),
        intr=small_intr,
        perturbation=("gaussian_noise", 0.05),
    )
    # constant net ignores the pixels, so the outcome is unchanged
    assert res.reached_goal


# -- metric arithmetic --------------------------------------------------------


def _result(reached_goal=False, reached_adv=False, cid=0):
    return ev.EpisodeResult(
        config_id=cid,
        steps=60,
        final_d_goal=0.2,
        final_d_adv=0.3,
        nearest="goal",
        reached_goal=reached_goal,
        reached_adv=reached_adv,
        tau=(0.4, 0.0, 0.5),
    )


def test_metrics_all_goal():
    rep = ev.metrics([_result(reached_goal=True, cid=i) for i in range(4)])
    assert rep.asr == 0.0 and rep.t_asr == 0.0
    assert rep.episodes == 4


def test_metrics_all_adv():
    rep = ev.metrics([_result(reached_adv=True, cid=i) for i in range(4)])
    assert rep.asr == 1.0 and rep.t_asr == 1.0


def test_metrics_mixed_rates():
    results = [
        _result(reached_goal=True),
        _result(reached_adv=True),
        _result(),
        _result(reached_goal=True),
    ]
    rep = ev.metrics(results)
    assert rep.asr == pytest.approx(0.5)
    assert rep.t_asr == pytest.approx(0.25)
    assert rep.t_asr <= rep.asr


def test_metrics_empty_rejected():
    with pytest.raises(ValueError):
        ev.metrics([])


def test_metrics_report_invariant_enforced():
    with pytest.raises(ValueError):
        ev.MetricsReport(asr=0.1, t_asr=0.5, e_trans=0.0, e_rot=0.0, episodes=2, config_hash="x")


def test_pair_errors_hand_values():
    zero = [0.0] * 6
    a = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0]
    et, er = ev.pair_errors(a, zero)
    assert et == pytest.approx(5.0, abs=1e-15)
    assert er == 0.0
    b = [0.0, 0.0, 0.0, math.pi / 2, 0.0, 0.0]
    et, er = ev.pair_errors(b, zero)
    assert et == 0.0
    assert er == pytest.approx(math.pi / 2, abs=1e-9)
    # a full turn is the identity rotation
    full = [0.0, 0.0, 0.0, 2.0 * math.pi, 0.0, 0.0]
    _, er = ev.pair_errors(full, zero)
    assert er == pytest.approx(0.0, abs=1e-6)


def test_pair_errors_match_rotation_matrices():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a = np.concatenate([rng.normal(size=3), rng.uniform(-2, 2, 3)])
        b = np.concatenate([rng.normal(size=3), rng.uniform(-2, 2, 3)])
        _, er = ev.pair_errors(a, b)
        expect = geo.rotation_angle(geo.rodrigues(a[3:6]), geo.rodrigues(b[3:6]))
        assert er == pytest.approx(expect, abs=1e-7)
        assert 0.0 <= er <= math.pi + 1e-12


def test_metrics_explicit_pairs():
    results = [_result(reached_goal=True)]
    pairs = [([1.0, 0, 0, 0, 0, 0], [0.0] * 6), ([0, 3.0, 0, 0, 0, 0], [0.0] * 6)]
    rep = ev.metrics(results, paired_actions=pairs)
    assert rep.e_trans == pytest.approx(2.0, abs=1e-15)
    assert rep.e_rot == 0.0


# -- evaluation drivers -------------------------------------------------------


@pytest.fixture(scope="module")
def toy_eval():
    """Small but non-degenerate evaluation: a real (untrained) policy."""
    net = pol.init_policy("toy", 16, seed=3)
    configs = [reachable_config(config_id=0), decoy_config(config_id=1)]
    tex = geo.TextureMap.random(8, 8, seed=5)
    intr = rd.CameraIntrinsics.square(16)
    report, results = ev.evaluate_texture(
        configs, net, tex, n_episodes=3, seed=11, intr=intr, horizon=8
    )
    return net, configs, tex, intr, report, results


def test_evaluate_texture_deterministic(toy_eval):
    net, configs, tex, intr, report, results = toy_eval
    report2, _ = ev.evaluate_texture(
        configs, net, tex, n_episodes=3, seed=11, intr=intr, horizon=8
    )
    assert report == report2


def test_evaluate_texture_validation(toy_eval):
    net, configs, tex, intr, _, _ = toy_eval
    with pytest.raises(ValueError):
        ev.evaluate_texture([], net, tex, n_episodes=1, seed=0, intr=intr)
    with pytest.raises(ValueError):
        ev.evaluate_texture(configs, net, tex, n_episodes=0, seed=0, intr=intr)


def test_jsonl_roundtrip_and_oracle(toy_eval):
    net, configs, tex, intr, report, results = toy_eval

    def oracle(records):
        n = len(records)
        n_goal = sum(1 for r in records if r["reached_goal"])
        n_adv = sum(1 for r in records if r["reached_adv"])
        asr = 1.0 - n_goal / n
        t_asr = n_adv / n
        pairs = [
            (rec["action"], rec["paired_action"])
            for r in records
            for rec in r["trajectory"]
            if rec.get("paired_action") is not None
        ]
        sum_t = sum_r = 0.0
        for a, b in pairs:
            dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
            sum_t += math.sqrt(dx * dx + dy * dy + dz * dz)

            def quat(w):
                th = math.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2)
                if th < 1e-12:
                    return (1.0, 0.0, 0.0, 0.0)
                s = math.sin(th / 2.0) / th
                return (math.cos(th / 2.0), w[0] * s, w[1] * s, w[2] * s)

            qa, qb = quat(a[3:6]), quat(b[3:6])
            d = abs(qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3])
            sum_r += 2.0 * math.acos(min(d, 1.0))
        e_t = sum_t / len(pairs) if pairs else 0.0
        e_r = sum_r / len(pairs) if pairs else 0.0
        return asr, t_asr, e_t, e_r

    import tempfile, os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "episodes.jsonl")
        ev.write_episode_logs(results, path)
        records = ev.read_episode_logs(path)
    assert len(records) == len(results)
    asr, t_asr, e_t, e_r = oracle(records)
    assert asr == report.asr
    assert t_asr == report.t_asr
    assert e_t == report.e_trans
    assert e_r == report.e_rot


def test_metrics_csv_roundtrip(tmp_path, toy_eval):
    net, configs, tex, intr, report, results = toy_eval
    row = ev.metrics_row("clean", report, seed=11, tex_hash=ev.texture_hash(tex))
    path = tmp_path / "metrics.csv"
    ev.write_metrics_csv([row], path)
    (back,) = ev.read_metrics_csv(path)
    assert back["condition"] == "clean"
    assert float(back["ASR"]) == report.asr
    assert float(back["E_trans_m"]) == report.e_trans
    assert back["texture_hash"] == ev.texture_hash(tex)


def test_robustness_sweep_zero_magnitude_matches_clean(march_net, small_intr):
    configs = [reachable_config()]
    tex = geo.TextureMap.uniform(4, 4, 0.5)
    out = ev.robustness_sweep(
        tex, march_net, [("gaussian_noise", 0.0)], configs, n_episodes=2, seed=3, intr=small_intr, horizon=20
    )
    labels = [label for label, _, _ in out]
    assert labels == ["clean", "gaussian_noise:0"]
    assert out[0][1] == out[1][1]


def test_transfer_check_degenerate_equals_whitebox(toy_eval):
    net, configs, tex, intr, report, _ = toy_eval
    rep = ev.transfer_check(tex, net, net, configs, n_episodes=3, seed=11, intr=intr, horizon=8)[0]
    assert rep == report


def test_phi_binned_rows():
    results = [
        _result(reached_goal=True),
        _result(reached_adv=True),
    ]
    results[0].tau = (0.4, 0.0, math.radians(10.0))
    results[1].tau = (0.4, 0.0, math.radians(65.0))
    rows = ev.phi_binned_rows(results)
    assert len(rows) == 4
    assert [r["episodes"] for r in rows] == [1, 0, 0, 1]
    assert rows[0]["asr"] == 0.0
    assert rows[1]["asr"] is None
    assert rows[3]["t_asr"] == 1.0


def test_baseline_2d_smoke(march_net, small_intr):
    # crafted pool keeps the run fast; zero-weight net exercises the
    # skip-update path inside the shared attack pipeline
    candidates = [reachable_config(config_id=0), reachable_config(theta=2.2, config_id=1)]
    out = ev.baseline_2d(
        march_net,
        seed=17,
        adv_kind="thin_patch",
        n_episodes=4,
        intr=small_intr,
        schedule=at.BetaStageSchedule(total_iterations=2),
        texture_shape=(4, 4),
        candidates=candidates,
        horizon=20,
    )
    assert out["pool_size"] == 2
    assert out["overall"].episodes == 4
    assert out["overall"].asr == 0.0  # constant net still reaches the goal
    assert len(out["bins"]) == 4
    assert len(out["history"]) == 2
    assert np.array_equal(out["texture"].values, np.full((4, 4, 3), 0.5))


def test_texture_hash_distinguishes():
    a = geo.TextureMap.uniform(4, 4, 0.5)
    b = geo.TextureMap.uniform(4, 4, 0.6)
    assert ev.texture_hash(a) != ev.texture_hash(b)
    assert ev.texture_hash(a) == ev.texture_hash(geo.TextureMap.uniform(4, 4, 0.5))
