"""Adversarial texture optimization.

Objectives: a targeted pose loss (heading cosine + next-position distance)
pulling the policy toward the textured object, a saliency-guidance loss
shifting Grad-CAM attention from the goal onto that object, and an
untargeted action-divergence variant. The two targeted gradients are
deconflicted with pairwise gradient projection, averaged over short rollouts
from many viewpoints, and applied as a normalized, clipped texture update.
A staged Beta distribution over camera distance implements the
coarse-to-fine curriculum.

Gradients flow through render -> policy -> loss only; executed actions are
gradient-stopped, so no backpropagation through environment dynamics.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import policy as pol
from . import render as rd
from .autodiff import Tensor
from .geometry import TextureMap


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- loss terms --------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_dist: float = 0.1
    lambda_saliency: float = 0.01
    eta: float = 0.1

    def __post_init__(self):
        if self.lambda_dist < 0 or self.lambda_saliency < 0:
            raise ValueError("loss weights must be >= 0")
        if not (self.eta > 0):
            raise ValueError(f"learning rate must be positive, got {self.eta}")


def loss_ori(v_ee, v_target):
    """1 - cos(v_ee, v_target), in [0, 2]; 0 when either norm vanishes."""
    v_ee, v_target = _t(v_ee), _t(v_target)
    nv, nt = ad.l2norm(v_ee), ad.l2norm(v_target)
    if nv.item() < 1e-9 or nt.item() < 1e-9:
        return Tensor(0.0)
    return ad.sub(Tensor(1.0), ad.div(ad.dot(v_ee, v_target), ad.mul(nv, nt)))


def loss_dist(p_adv, p_next):
    """Euclidean distance between the object anchor and the intended position."""
    return ad.l2norm(ad.sub(_t(p_adv), _t(p_next)))


def loss_pose(ori, dist, weights):
    return ad.add(_t(ori), ad.mul(Tensor(weights.lambda_dist), _t(dist)))


def masked_mean(s, mask):
    """Mean of s over a binary mask; an empty mask contributes exactly 0."""
    mask = np.asarray(mask)
    count = float(mask.sum())
    if count == 0.0:
        return Tensor(0.0)
    return ad.div(ad.tsum(ad.mul(_t(s), Tensor(mask.astype(np.float64)))), Tensor(count))


def loss_saliency(s, m_adv, m_goal):
    """-mean(S on the adversarial object) + mean(S on the goal object)."""
    return ad.add(ad.mul(Tensor(-1.0), masked_mean(s, m_adv)), masked_mean(s, m_goal))


def loss_untargeted(a, a_gt, s, m_goal, lambda_saliency):
    """-||a - a_gt||^2 + lambda * mean(S on goal); a_gt is gradient-stopped."""
    d = ad.sub(_t(a), Tensor(np.asarray(a_gt, dtype=np.float64)))
    divergence = ad.tsum(ad.mul(d, d))
    sal = ad.mul(Tensor(float(lambda_saliency)), masked_mean(s, m_goal))
    return ad.add(ad.mul(Tensor(-1.0), divergence), sal)


# -- gradient surgery --------------------------------------------------------


def pcgrad(g1, g2, seed=0):
    """Pairwise gradient projection: remove each gradient's conflicting
    component along the *raw* other when their dot product is negative.

    The pair order is drawn from ``seed`` (with two tasks both orders give
    the same result, but the contract fixes the randomization source).
    Zero-norm counterparts skip the projection. Returns (g1', g2'); the
    combined update is their sum.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    np.random.default_rng(seed).permutation(2)
    out1, out2 = g1.copy(), g2.copy()
    d = float(g1.ravel() @ g2.ravel())
    if d < 0.0:
        n2 = float(g2.ravel() @ g2.ravel())
        if n2 > 0.0:
            out1 = g1 - (d / n2) * g2
        n1 = float(g1.ravel() @ g1.ravel())
        if n1 > 0.0:
            out2 = g2 - (d / n1) * g1
    return out1, out2


# -- coarse-to-fine schedule -------------------------------------------------

DEFAULT_STAGES = (
    (13.48, 2.39),
    (23.13, 10.49),
    (19.88, 19.88),
    (10.49, 23.13),
    (2.39, 13.48),
)

SCHEDULE_MODES = ("c2f", "f2c", "non_staged", "coarse_only", "fine_only")


@dataclass(frozen=True)
class BetaStageSchedule:
    """Camera-distance curriculum: equal iteration spans, one Beta law each.

    mode selects the ablation variant: c2f (default stage order), f2c
    (reversed), non_staged (uniform r throughout), coarse_only / fine_only
    (first / last stage parameters throughout).
    """

    r_min: float = 0.25
    r_max: float = 0.8
    total_iterations: int = 500
    stages: tuple = DEFAULT_STAGES
    mode: str = "c2f"

    def __post_init__(self):
        if not (0 < self.r_min < self.r_max):
            raise ValueError(f"need 0 < r_min < r_max, got [{self.r_min}, {self.r_max}]")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if not self.stages or any(a <= 0 or b <= 0 for a, b in self.stages):
            raise ValueError("every stage needs alpha > 0 and beta > 0")
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"unknown schedule mode {self.mode!r}; pick from {SCHEDULE_MODES}")

    def effective_stages(self):
        if self.mode == "f2c":
            return self.stages[::-1]
        if self.mode == "coarse_only":
            return (self.stages[0],) * len(self.stages)
        if self.mode == "fine_only":
            return (self.stages[-1],) * len(self.stages)
        return self.stages

    def stage_index(self, iteration):
        if not (0 <= iteration < self.total_iterations):
            raise ValueError(
                f"iteration {iteration} outside [0, {self.total_iterations})"
            )
        return iteration * len(self.stages) // self.total_iterations

    def sample_r(self, iteration, rng):
        if self.mode == "non_staged":
            u = rng.uniform()
        else:
            a, b = self.effective_stages()[self.stage_index(iteration)]
            u = rng.beta(a, b)
        return self.r_min + u * (self.r_max - self.r_min)

    def stage_mean_r(self, stage):
        a, b = self.effective_stages()[stage]
        return self.r_min + a / (a + b) * (self.r_max - self.r_min)


def sample_tau(schedule, iteration, rng, phi_max=np.deg2rad(75.0)):
    """Viewpoint draw: r from the stage's Beta law, uniform azimuth/polar."""
    r = schedule.sample_r(iteration, rng)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phi = rng.uniform(0.0, phi_max)
    return geo.SphericalPose(r=r, theta=theta, phi=phi)


# -- config pool -------------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    """A task-feasible scene with its prebuilt render inputs."""

    cfg: geo.SceneConfig
    scene_full: rd.Scene
    scene_sim: rd.Scene
    scene_adv: rd.Scene
    p_adv: np.ndarray
    p_goal: np.ndarray


def build_pool(configs, objects):
    entries = []
    for cfg in configs:
        full, sim, adv = rd.scene_triplet(objects, cfg)
        entries.append(
            PoolEntry(
                cfg=cfg,
                scene_full=full,
                scene_sim=sim,
                scene_adv=adv,
                p_adv=rd.adv_center(objects, cfg),
                p_goal=rd.goal_center(objects, cfg),
            )
        )
    return tuple(entries)


def generate_candidates(n, seed, workspace=None, r_range=(0.25, 0.8)):
    """Seeded scene draws with uniformly distributed start distances."""
    workspace = workspace or geo.Workspace()
    rng = np.random.default_rng(seed)
    return [
        geo.sample_scene(
            int(rng.integers(2**31)), float(rng.uniform(*r_range)), workspace, config_id=i
        )
        for i in range(n)
    ]


def filter_configs(candidates, net, objects, intr, horizon=60, d_success=0.05):
    """Keep exactly the configs the benign policy solves; raise if none."""
    from . import evaluate as ev  # deferred: evaluate imports this module

    textures = rd.default_textures()
    kept = []
    for cfg in candidates:
        result = ev.run_episode(
            cfg, net, textures, objects=objects, intr=intr, horizon=horizon, d_success=d_success
        )
        if result.reached_goal:
            kept.append(cfg)
    if not kept:
        raise RuntimeError(
            f"config filtering kept 0 of {len(candidates)} candidates; "
            "the benign policy solves none of them, so the attack cannot proceed"
        )
    return kept


# -- the EOT loop ------------------------------------------------------------

LOSS_MODES = ("targeted", "untargeted", "pose_only", "saliency_only")


@dataclass
class AttackSetup:
    """Everything an EOT step needs besides the evolving state."""

    net: pol.PolicyNet
    objects: rd.ObjectSet
    intr: rd.CameraIntrinsics
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: BetaStageSchedule = field(default_factory=BetaStageSchedule)
    loss_mode: str = "targeted"
    n_env: int = 4
    rollout_k: int = 10

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}; pick from {LOSS_MODES}")
        if self.n_env < 1 or self.rollout_k < 1:
            raise ValueError("n_env and rollout_k must be >= 1")


@dataclass
class AttackState:
    texture: TextureMap
    pool: tuple
    rng: np.random.Generator
    iteration: int = 0
    skipped_updates: int = 0
    history: list = field(default_factory=list)


def make_state(texture, pool, seed):
    if not pool:
        raise ValueError("config pool is empty")
    return AttackState(
        texture=texture.validate(), pool=tuple(pool), rng=np.random.default_rng(seed)
    )


def _select_entries(state, schedule, n_env):
    """Pick n_env pool entries whose start distance tracks the curriculum:
    nearest available r to each Beta draw, without replacement."""
    available = list(range(len(state.pool)))
    picked = []
    for _ in range(n_env):
        if not available:
            available = list(range(len(state.pool)))
        r_star = schedule.sample_r(state.iteration, state.rng)
        radii = np.array([state.pool[i].cfg.ee_init.r for i in available])
        j = int(np.argmin(np.abs(radii - r_star)))
        picked.append(state.pool[available.pop(j)])
    return picked


def _grad_snapshot(loss_t, tex_t, scale=1.0):
    """Backward, copy the texture gradient, then clear the subgraph."""
    loss_t.backward()
    g = np.zeros_like(tex_t.data) if tex_t.grad is None else tex_t.grad * scale
    loss_t.zero_subgraph()
    return g


def eot_step(state, setup):
    """One texture update from fresh rollouts across sampled viewpoints.

    Rolls out K policy steps in each of n_env selected scenes, accumulating
    per-step losses on the hybrid-composited observation. Texture gradients
    of the two objectives are averaged over all steps, deconflicted with
    pcgrad, normalized to unit length, scaled by eta, and applied with
    clipping to [0, 1].
    """
    w = setup.weights
    tex_t = Tensor(state.texture.values, requires_grad=True)
    static = rd.default_textures()
    current = dict(static, adv=TextureMap(tex_t.data))
    hw = (setup.intr.height, setup.intr.width)

    g_main = np.zeros_like(tex_t.data)
    g_sal = np.zeros_like(tex_t.data)
    sums = {"ori": 0.0, "dist": 0.0, "sal": 0.0}
    n_steps = 0
    for entry in _select_entries(state, setup.schedule, setup.n_env):
        ee = geo.to_pose(entry.cfg.ee_init, entry.p_adv)
        for _ in range(setup.rollout_k):
            out_full = rd.rasterize(entry.scene_full, ee, setup.intr, current)
            out_sim = rd.rasterize(entry.scene_sim, ee, setup.intr, static)
            _, img_diff = rd.rasterize_diff(entry.scene_adv, ee, setup.intr, tex_t)
            m_adv = out_full.masks["adv"]
            m_goal = out_full.masks["goal"]
            obs = rd.composite(out_sim.image, img_diff, m_adv)
            action_t, feat_t, a4_t = pol.policy_graph(setup.net, obs)

            want_saliency = setup.loss_mode in ("targeted", "untargeted", "saliency_only")
            if want_saliency:
                s_t = pol.saliency_graph(action_t, feat_t, a4_t, hw)
                l_sal = loss_saliency(s_t, m_adv, m_goal)
                sums["sal"] += l_sal.item()

            if setup.loss_mode in ("targeted", "pose_only"):
                p_next, v_ee = geo.motion_graph(ee, action_t)
                v_target = ad.sub(Tensor(entry.p_adv), p_next)
                l_ori = loss_ori(v_ee, v_target)
                l_dist = loss_dist(entry.p_adv, p_next)
                l_pose = loss_pose(l_ori, l_dist, w)
                sums["ori"] += l_ori.item()
                sums["dist"] += l_dist.item()
                g_main += _grad_snapshot(l_pose, tex_t)
                if setup.loss_mode == "targeted":
                    g_sal += _grad_snapshot(l_sal, tex_t, scale=w.lambda_saliency)
            elif setup.loss_mode == "saliency_only":
                g_main += _grad_snapshot(l_sal, tex_t)
            else:  # untargeted
                benign = rd.rasterize(entry.scene_full, ee, setup.intr, static)
                a_gt = pol.forward_np(setup.net, benign.image)
                l_unt = loss_untargeted(action_t, a_gt, s_t, m_goal, w.lambda_saliency)
                g_main += _grad_snapshot(l_unt, tex_t)

            n_steps += 1
            ee = geo.apply_action(ee, action_t.data)

    g_main /= n_steps
    g_sal /= n_steps
    conflict = 0
    if setup.loss_mode == "targeted":
        conflict = int(float(g_main.ravel() @ g_sal.ravel()) < 0.0)
        g1, g2 = pcgrad(g_main, g_sal, seed=int(state.rng.integers(2**31)))
        g = g1 + g2
    else:
        g = g_main

    gnorm = float(np.linalg.norm(g.ravel()))
    direction_norm = 0.0
    if gnorm < 1e-12:
        state.skipped_updates += 1
    else:
        direction = g / gnorm
        direction_norm = float(np.linalg.norm(direction.ravel()))
        updated = np.clip(state.texture.values - w.eta * direction, 0.0, 1.0)
        state.texture = TextureMap(updated).validate()
    state.history.append(
        {
            "iteration": state.iteration,
            "stage": setup.schedule.stage_index(state.iteration),
            "loss_ori": sums["ori"] / n_steps,
            "loss_dist": sums["dist"] / n_steps,
            "loss_sal": sums["sal"] / n_steps,
            "grad_norm": gnorm,
            "pcgrad_conflict": conflict,
            "direction_norm": direction_norm,
        }
    )
    state.iteration += 1
    return state


def run_attack(
    setup,
    pool,
    seed,
    texture_init=None,
    texture_shape=(32, 32),
    checkpoint_every=0,
    out_dir=None,
    callback=None,
):
    """Drive eot_step for the schedule's full iteration budget.

    Returns (final TextureMap, history). Fully deterministic given the seed;
    checkpoints (PPM + float sidecar) are written every ``checkpoint_every``
    iterations when ``out_dir`` is set.
    """
    if texture_init is None:
        texture_init = TextureMap.uniform(texture_shape[0], texture_shape[1], 0.5)
    state = make_state(texture_init, pool, seed)
    total = setup.schedule.total_iterations
    for _ in range(total):
        eot_step(state, setup)
        it = state.iteration
        if out_dir is not None and checkpoint_every and it % checkpoint_every == 0 and it < total:
            rd.save_texture(state.texture, f"{out_dir}/texture_iter{it:06d}")
        if callback is not None:
            callback(state)
    return state.texture, state.history


ATTACK_LOG_COLUMNS = (
    "iteration",
    "stage",
    "loss_ori",
    "loss_dist",
    "loss_sal",
    "grad_norm",
    "pcgrad_conflict",
)


def write_attack_log(history, path):
    """One CSV row per iteration; floats serialized losslessly via repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ATTACK_LOG_COLUMNS)
        for row in history:
            writer.writerow(
                [
                    row["iteration"],
                    row["stage"],
                    repr(row["loss_ori"]),
                    repr(row["loss_dist"]),
                    repr(row["loss_sal"]),
                    repr(row["grad_norm"]),
                    row["pcgrad_conflict"],
                ]
            )
