"""Episode rollouts, attack metrics, and the comparison experiments.

Metrics: ASR (failure rate to reach the goal), T-ASR (rate of redirection
to the adversarial object), E_trans / E_rot (mean action deviation between
paired attacked and benign observations of the same states).

All metric arithmetic is plain left-to-right Python float math over the
logged values, so an independent pass over the JSONL episode logs can
reproduce the reported numbers bit-exactly.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import attack as at
from . import geometry as geo
from . import policy as pol
from . import render as rd
from .geometry import TextureMap

OBJECT_ORDER = ("goal", "adv")  # distractors follow; ties break by this order


@dataclass
class EpisodeResult:
    config_id: int
    steps: int
    final_d_goal: float
    final_d_adv: float
    nearest: str  # object name closest to the end-effector at episode end
    reached_goal: bool
    reached_adv: bool
    tau: tuple  # (r, theta, phi) of the start pose, for binning
    trajectory: list = field(default_factory=list)


@dataclass(frozen=True)
class MetricsReport:
    asr: float
    t_asr: float
    e_trans: float
    e_rot: float
    episodes: int
    config_hash: str

    def __post_init__(self):
        if self.t_asr > self.asr + 1e-15:
            raise ValueError(
                f"T-ASR {self.t_asr} exceeds ASR {self.asr}; success flags are inconsistent"
            )


def texture_hash(texture):
    values = texture.values if isinstance(texture, TextureMap) else np.asarray(texture)
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


def _object_centers(objects, cfg):
    centers = [
        ("goal", rd.goal_center(objects, cfg)),
        ("adv", rd.adv_center(objects, cfg)),
    ]
    for i, pos in enumerate(cfg.distractor_pos):
        centers.append((f"distractor{i}", np.asarray(pos) + objects.distractor.centroid_offset()))
    return centers


def _nearest(centers, p):
    dists = [(name, float(np.linalg.norm(p - c))) for name, c in centers]
    name = min(dists, key=lambda nd: nd[1])[0]
    return name, dict(dists)


def _perturb_seed(cfg_seed, step):
    return int(np.random.SeedSequence((cfg_seed, step)).generate_state(1)[0])


def run_episode(
    config,
    net,
    textures,
    objects=None,
    intr=None,
    horizon=60,
    d_success=0.05,
    perturbation=None,
    paired_textures=None,
):
    """Closed-loop rollout of the policy in one scene.

    Success at a step means the end-effector is within d_success of an
    object's center and that object is the nearest one; the episode stops at
    the first success. ``perturbation`` is an optional (kind, magnitude)
    applied to every observation with a per-step seed derived from the scene
    seed. With ``paired_textures`` set, the policy is additionally queried on
    a render of the same state under those textures (gradient-free), giving
    the action pairs behind E_trans / E_rot.
    """
    objects = objects or rd.default_objects()
    intr = intr or rd.CameraIntrinsics.square(64)
    scene = rd.build_scene(objects, config)
    centers = _object_centers(objects, config)
    p_adv = rd.adv_center(objects, config)
    ee = geo.to_pose(config.ee_init, p_adv)

    trajectory = []
    reached_goal = reached_adv = False
    steps = 0
    for step in range(horizon):
        out = rd.rasterize(scene, ee, intr, textures)
        obs = out.image
        if perturbation is not None:
            kind, magnitude = perturbation
            obs = rd.perturb(obs, kind, magnitude, seed=_perturb_seed(config.seed, step), masks=out.masks)
        action = pol.forward_np(net, obs)
        record = {
            "p": [float(x) for x in ee.p],
            "rot": [float(x) for x in ee.R.ravel()],
            "action": [float(x) for x in action],
        }
        if paired_textures is not None:
            ben = rd.rasterize(scene, ee, intr, paired_textures).image
            if perturbation is not None:
                kind, magnitude = perturbation
                ben = rd.perturb(ben, kind, magnitude, seed=_perturb_seed(config.seed, step), masks=out.masks)
            record["paired_action"] = [float(x) for x in pol.forward_np(net, ben)]
        trajectory.append(record)

        ee = geo.apply_action(ee, action)
        steps = step + 1
        name, dists = _nearest(centers, ee.p)
        if dists[name] <= d_success:
            reached_goal = name == "goal"
            reached_adv = name == "adv"
            if reached_goal or reached_adv:
                break
    name, dists = _nearest(centers, ee.p)
    tau = config.ee_init
    return EpisodeResult(
        config_id=config.config_id,
        steps=steps,
        final_d_goal=dists["goal"],
        final_d_adv=dists["adv"],
        nearest=name,
        reached_goal=reached_goal,
        reached_adv=reached_adv,
        tau=(tau.r, tau.theta, tau.phi),
        trajectory=trajectory,
    )


# -- metric arithmetic (kept trivially re-implementable) ----------------------


def rotation_quat(w):
    """Axis-angle (3,) -> unit quaternion (w, x, y, z), scalar math only."""
    x, y, z = float(w[0]), float(w[1]), float(w[2])
    theta = math.sqrt(x * x + y * y + z * z)
    if theta < 1e-12:
        return (1.0, 0.0, 0.0, 0.0)
    s = math.sin(theta / 2.0) / theta
    return (math.cos(theta / 2.0), x * s, y * s, z * s)


def pair_errors(a_adv, a_ben):
    """Per-pair (translation L2, rotation geodesic angle) of two actions.

    The rotation angle compares the axis-angle parts as rotations via the
    quaternion inner product, so it is parameterization-independent and in
    [0, pi].
    """
    dx = float(a_adv[0]) - float(a_ben[0])
    dy = float(a_adv[1]) - float(a_ben[1])
    dz = float(a_adv[2]) - float(a_ben[2])
    e_trans = math.sqrt(dx * dx + dy * dy + dz * dz)
    qa = rotation_quat(a_adv[3:6])
    qb = rotation_quat(a_ben[3:6])
    dot = abs(qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3])
    e_rot = 2.0 * math.acos(min(dot, 1.0))
    return e_trans, e_rot


def collect_pairs(results):
    """Ordered (attacked, benign) action pairs from episode trajectories."""
    pairs = []
    for r in results:
        for rec in r.trajectory:
            if rec.get("paired_action") is not None:
                pairs.append((rec["action"], rec["paired_action"]))
    return pairs


def metrics(results, paired_actions=None):
    """Aggregate episode outcomes into a MetricsReport.

    ASR = 1 - n_goal/n; T_ASR = n_adv/n; E_trans and E_rot are plain ordered
    means of pair_errors over the action pairs (taken from the trajectories
    when not passed explicitly). Pair-free inputs report 0 for both errors.
    """
    results = list(results)
    if not results:
        raise ValueError("metrics requires at least one episode result")
    n = len(results)
    n_goal = sum(1 for r in results if r.reached_goal)
    n_adv = sum(1 for r in results if r.reached_adv)
    asr = 1.0 - n_goal / n
    t_asr = n_adv / n
    if paired_actions is None:
        paired_actions = collect_pairs(results)
    e_trans = e_rot = 0.0
    if paired_actions:
        sum_t = 0.0
        sum_r = 0.0
        for a_adv, a_ben in paired_actions:
            et, er = pair_errors(a_adv, a_ben)
            sum_t += et
            sum_r += er
        e_trans = sum_t / len(paired_actions)
        e_rot = sum_r / len(paired_actions)
    ids = ",".join(str(r.config_id) for r in results)
    chash = hashlib.sha256(ids.encode()).hexdigest()[:16]
    return MetricsReport(
        asr=asr, t_asr=t_asr, e_trans=e_trans, e_rot=e_rot, episodes=n, config_hash=chash
    )


# -- evaluation drivers -------------------------------------------------------


def _as_texture(texture):
    return texture if isinstance(texture, TextureMap) else TextureMap(texture).validate()


_EPISODE_CTX = {}


def _episode_worker_init(ctx):
    _EPISODE_CTX.update(ctx)


def _episode_task(config_index):
    c = _EPISODE_CTX
    return run_episode(
        c["configs"][config_index],
        c["net"],
        c["attacked"],
        objects=c["objects"],
        intr=c["intr"],
        horizon=c["horizon"],
        d_success=c["d_success"],
        perturbation=c["perturbation"],
        paired_textures=c["paired_textures"],
    )


def evaluate_texture(
    configs,
    net,
    adv_texture,
    n_episodes,
    seed,
    objects=None,
    intr=None,
    horizon=60,
    d_success=0.05,
    perturbation=None,
    paired=True,
    jobs=1,
):
    """Run n_episodes over seeded draws from the config pool.

    Returns (MetricsReport, episode results). With ``paired`` the benign
    texture is rendered at every attacked state for the E_trans / E_rot
    pairing. Episodes are independent and merged in draw order, so the
    output is identical for any ``jobs`` count.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("evaluation needs a non-empty config pool")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    objects = objects or rd.default_objects()
    intr = intr or rd.CameraIntrinsics.square(64)
    ctx = {
        "configs": configs,
        "net": net,
        "attacked": rd.default_textures(adv_texture=_as_texture(adv_texture)),
        "objects": objects,
        "intr": intr,
        "horizon": horizon,
        "d_success": d_success,
        "perturbation": perturbation,
        "paired_textures": rd.default_textures() if paired else None,
    }
    rng = np.random.default_rng(seed)
    picks = [int(i) for i in rng.integers(0, len(configs), size=n_episodes)]
    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(
            jobs, initializer=_episode_worker_init, initargs=(ctx,)
        ) as pool:
            results = pool.map(_episode_task, picks)
    else:
        _episode_worker_init(ctx)
        results = [_episode_task(i) for i in picks]
    return metrics(results), results


def transfer_check(texture, source_net, target_net, configs, n_episodes, seed, **kwargs):
    """Source-optimized texture evaluated against an independent policy.

    Passing target_net=source_net reproduces the white-box report exactly.
    """
    del source_net  # the texture already encodes the source; kept for the record
    return evaluate_texture(configs, target_net, texture, n_episodes, seed, **kwargs)


def robustness_sweep(texture, net, conditions, configs, n_episodes, seed, **kwargs):
    """Evaluate under each (kind, magnitude) perturbation plus the clean run.

    Returns an ordered list of (condition label, MetricsReport, results).
    """
    out = []
    report, results = evaluate_texture(configs, net, texture, n_episodes, seed, **kwargs)
    out.append(("clean", report, results))
    for kind, magnitude in conditions:
        report, results = evaluate_texture(
            configs, net, texture, n_episodes, seed, perturbation=(kind, magnitude), **kwargs
        )
        out.append((f"{kind}:{magnitude:g}", report, results))
    return out


DEFAULT_PHI_BINS = ((0.0, 20.0), (20.0, 40.0), (40.0, 60.0), (60.0, 90.0))


def phi_binned_rows(results, phi_bins=DEFAULT_PHI_BINS):
    """One row per polar-angle bin: episode subset metrics, blank when empty."""
    rows = []
    for lo, hi in phi_bins:
        subset = [r for r in results if lo <= math.degrees(r.tau[2]) < hi]
        row = {"phi_lo_deg": lo, "phi_hi_deg": hi, "episodes": len(subset)}
        if subset:
            rep = metrics(subset)
            row.update(asr=rep.asr, t_asr=rep.t_asr, e_trans=rep.e_trans, e_rot=rep.e_rot)
        else:
            row.update(asr=None, t_asr=None, e_trans=None, e_rot=None)
        rows.append(row)
    return rows


def baseline_2d(
    net,
    seed,
    adv_kind="thin_patch",
    n_candidates=40,
    n_episodes=60,
    intr=None,
    weights=None,
    schedule=None,
    texture_shape=(32, 32),
    phi_bins=DEFAULT_PHI_BINS,
    horizon=60,
    d_success=0.05,
    candidates=None,
):
    """The 2D-patch arm of the comparison: identical pipeline, flat mesh.

    Builds the scene set with ``adv_kind``, filters it with the benign
    policy, optimizes a texture with the standard attack, evaluates, and
    bins the episodes by start polar angle. Running with adv_kind="cuboid"
    gives the 3D arm through the very same code path. ``candidates``
    overrides the internally generated scene draws.
    """
    intr = intr or rd.CameraIntrinsics.square(64)
    weights = weights or at.LossWeights()
    schedule = schedule or at.BetaStageSchedule()
    from .config import seed_stream  # deferred: config imports this package's attack

    objects = rd.default_objects(adv_kind)
    sub = seed_stream(seed, "baseline-" + adv_kind)
    if candidates is None:
        candidates = at.generate_candidates(n_candidates, sub("candidates"))
    kept = at.filter_configs(candidates, net, objects, intr, horizon=horizon, d_success=d_success)
    pool = at.build_pool(kept, objects)
    setup = at.AttackSetup(net=net, objects=objects, intr=intr, weights=weights, schedule=schedule)
    texture, history = at.run_attack(setup, pool, sub("attack"), texture_shape=texture_shape)
    report, results = evaluate_texture(
        kept,
        net,
        texture,
        n_episodes,
        sub("eval"),
        objects=objects,
        intr=intr,
        horizon=horizon,
        d_success=d_success,
    )
    return {
        "overall": report,
        "bins": phi_binned_rows(results, phi_bins),
        "texture": texture,
        "history": history,
        "results": results,
        "pool_size": len(kept),
    }


# -- artifact I/O -------------------------------------------------------------

METRICS_COLUMNS = (
    "condition",
    "episodes",
    "ASR",
    "T_ASR",
    "E_trans_m",
    "E_rot_rad",
    "seed",
    "texture_hash",
)


def metrics_row(condition, report, seed, tex_hash):
    return {
        "condition": condition,
        "episodes": report.episodes,
        "ASR": report.asr,
        "T_ASR": report.t_asr,
        "E_trans_m": report.e_trans,
        "E_rot_rad": report.e_rot,
        "seed": seed,
        "texture_hash": tex_hash,
    }


def write_metrics_csv(rows, path):
    """Floats go through repr, so reading the CSV back loses nothing."""
    import csv

    def cell(v):
        return repr(v) if isinstance(v, float) else ("" if v is None else str(v))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([cell(row[c]) for c in METRICS_COLUMNS])


def read_metrics_csv(path):
    import csv

    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def episode_record(result):
    return {
        "config_id": result.config_id,
        "steps": result.steps,
        "final_d_goal": result.final_d_goal,
        "final_d_adv": result.final_d_adv,
        "nearest": result.nearest,
        "reached_goal": result.reached_goal,
        "reached_adv": result.reached_adv,
        "tau": list(result.tau),
        "trajectory": result.trajectory,
    }


def write_episode_logs(results, path):
    """One JSON record per line; floats round-trip exactly."""
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(episode_record(r)) + "\n")


def read_episode_logs(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
