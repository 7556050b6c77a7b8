"""Run configuration: typed sections, flat key=value parsing, snapshots.

The on-disk format is one ``section.field = value`` assignment per line
(top-level fields have no section prefix), with ``#`` comments. Unknown
sections or fields are rejected by name, so typos cannot silently fall back
to defaults. ``resolved_text`` serializes a config such that parsing it back
reproduces the exact same values, floats included.

All randomness in a run flows from the single root ``seed`` through named
substreams (see seed_stream), so changing e.g. the evaluation episode count
does not shift the attack's draws.
"""

import zlib
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import attack as at
from . import geometry as geo
from . import policy as pol


@dataclass
class PolicySection:
    arch: str = "a"
    demos: int = 40
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    explore_prob: float = 0.25
    k_p: float = 0.8


@dataclass
class WorkspaceSection:
    half_extent: float = 0.5
    margin: float = 0.08
    clearance: float = 0.03
    goal_radius: float = 0.05
    adv_radius: float = 0.06
    distractor_radius: float = 0.04
    n_distractors: int = 1
    phi_max_deg: float = 75.0


@dataclass
class SceneSection:
    candidates: int = 60
    r_min: float = 0.25
    r_max: float = 0.8


@dataclass
class AttackSection:
    iterations: int = 500
    texture_size: int = 32
    eta: float = 0.1
    lambda_dist: float = 0.1
    lambda_saliency: float = 0.01
    n_env: int = 4
    rollout_k: int = 10
    mode: str = "c2f"
    loss: str = "targeted"
    stages: tuple = at.DEFAULT_STAGES
    checkpoint_every: int = 100


@dataclass
class EvalSection:
    episodes: int = 100
    horizon: int = 60
    d_success: float = 0.05
    perturbations: tuple = ()  # ((kind, magnitude), ...)
    transfer_arch: str = "b"


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    jobs: int = 1
    image_size: int = 64
    adv_kind: str = "cuboid"
    policy: PolicySection = field(default_factory=PolicySection)
    workspace: WorkspaceSection = field(default_factory=WorkspaceSection)
    scenes: SceneSection = field(default_factory=SceneSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)


# -- value parsing / formatting ----------------------------------------------


def _parse_stages(raw):
    pairs = []
    for part in raw.split(","):
        a, _, b = part.strip().partition(":")
        pairs.append((float(a), float(b)))
    return tuple(pairs)


def _parse_perturbations(raw):
    if not raw.strip():
        return ()
    out = []
    for part in raw.split(","):
        kind, sep, mag = part.strip().partition(":")
        if not sep:
            raise ValueError(f"perturbation {part.strip()!r} must look like kind:magnitude")
        out.append((kind, float(mag)))
    return tuple(out)


def _format_value(name, value):
    if name == "stages":
        return ",".join(f"{a!r}:{b!r}" for a, b in value)
    if name == "perturbations":
        return ",".join(f"{k}:{m!r}" for k, m in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SPECIAL_PARSERS = {"stages": _parse_stages, "perturbations": _parse_perturbations}


def _convert(dotted, default, raw):
    name = dotted.rsplit(".", 1)[-1]
    try:
        if name in _SPECIAL_PARSERS:
            return _SPECIAL_PARSERS[name](raw)
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return type(default)(raw)
    except ValueError as exc:
        raise ValueError(
            f"config field {dotted!r}: cannot parse {raw!r} as {type(default).__name__}"
        ) from exc


def apply_assignment(cfg, key, raw):
    """Set one dotted field from its textual value; unknown names rejected."""
    key = key.strip()
    section, sep, name = key.partition(".")
    if not sep:
        target, name = cfg, key
    else:
        if section not in {f.name for f in fields(cfg)} or not is_dataclass(getattr(cfg, section)):
            raise ValueError(f"unknown config section {section!r} in {key!r}")
        target = getattr(cfg, section)
    if name not in {f.name for f in fields(target)} or is_dataclass(getattr(target, name)):
        raise ValueError(f"unknown config field {key!r}")
    setattr(target, name, _convert(key, getattr(target, name), raw))


def parse_config(text):
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line.strip()!r}")
        apply_assignment(cfg, key.strip(), raw.strip())
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def resolved_text(cfg):
    """Full config as assignments; parse_config(resolved_text(c)) == c."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            for sub in fields(value):
                lines.append(
                    f"{f.name}.{sub.name} = {_format_value(sub.name, getattr(value, sub.name))}"
                )
        else:
            lines.append(f"{f.name} = {_format_value(f.name, value)}")
    return "\n".join(lines) + "\n"


def write_snapshot(cfg, path):
    with open(path, "w") as fh:
        fh.write(resolved_text(cfg))


# -- validation ---------------------------------------------------------------

ADV_KINDS = ("cuboid", "thin_patch", "cylinder", "icosphere")


def validate(cfg):
    def bad(name, why):
        raise ValueError(f"config field {name!r} {why}")

    if cfg.jobs < 1:
        bad("jobs", "must be >= 1")
    if cfg.image_size < 16:
        bad("image_size", "must be >= 16")
    if cfg.adv_kind not in ADV_KINDS:
        bad("adv_kind", f"must be one of {ADV_KINDS}")
    if cfg.policy.arch not in pol.ARCHS:
        bad("policy.arch", f"must be one of {tuple(pol.ARCHS)}")
    if cfg.eval.transfer_arch not in pol.ARCHS:
        bad("eval.transfer_arch", f"must be one of {tuple(pol.ARCHS)}")
    if cfg.policy.demos < 1 or cfg.policy.epochs < 1:
        bad("policy.demos", "and policy.epochs must be >= 1")
    if not (0.0 < cfg.scenes.r_min < cfg.scenes.r_max):
        bad("scenes.r_min", f"needs 0 < r_min < r_max, got [{cfg.scenes.r_min}, {cfg.scenes.r_max}]")
    if cfg.scenes.candidates < 1:
        bad("scenes.candidates", "must be >= 1")
    if cfg.attack.texture_size < 2:
        bad("attack.texture_size", "must be >= 2")
    if cfg.attack.iterations < 0:
        bad("attack.iterations", "must be >= 0")
    if cfg.attack.mode not in at.SCHEDULE_MODES:
        bad("attack.mode", f"must be one of {at.SCHEDULE_MODES}")
    if cfg.attack.loss not in at.LOSS_MODES:
        bad("attack.loss", f"must be one of {at.LOSS_MODES}")
    if cfg.attack.checkpoint_every < 0:
        bad("attack.checkpoint_every", "must be >= 0")
    if cfg.eval.episodes < 1:
        bad("eval.episodes", "must be >= 1")
    if cfg.eval.horizon < 1:
        bad("eval.horizon", "must be >= 1")
    if not (0.0 < cfg.eval.d_success < 1.0):
        bad("eval.d_success", "must be in (0, 1) meters")
    if cfg.attack.eta <= 0.0:
        bad("attack.eta", "must be > 0")
    if cfg.attack.lambda_dist < 0.0 or cfg.attack.lambda_saliency < 0.0:
        bad("attack.lambda_dist", "and attack.lambda_saliency must be >= 0")
    try:
        make_weights(cfg)
        make_schedule(cfg)  # validates stages
    except ValueError as exc:
        bad("attack.stages", f"invalid: {exc}")
    return cfg


# -- bridges into the engine modules ------------------------------------------


def make_workspace(cfg):
    w = cfg.workspace
    return geo.Workspace(
        half_extent=w.half_extent,
        margin=w.margin,
        clearance=w.clearance,
        goal_radius=w.goal_radius,
        adv_radius=w.adv_radius,
        distractor_radius=w.distractor_radius,
        n_distractors=w.n_distractors,
        phi_max=np.deg2rad(w.phi_max_deg),
    )


def make_weights(cfg):
    a = cfg.attack
    return at.LossWeights(
        lambda_dist=a.lambda_dist, lambda_saliency=a.lambda_saliency, eta=a.eta
    )


def make_schedule(cfg):
    return at.BetaStageSchedule(
        r_min=cfg.scenes.r_min,
        r_max=cfg.scenes.r_max,
        total_iterations=cfg.attack.iterations,
        stages=cfg.attack.stages,
        mode=cfg.attack.mode,
    )


# -- seeding ------------------------------------------------------------------


def seed_stream(root_seed, name):
    """Named substream factory: stream("label") is a stable derived seed.

    Derivation hashes "name/label", so adding a new stream never perturbs
    existing ones.
    """

    def sub(label):
        tag = zlib.crc32(f"{name}/{label}".encode())
        return int(np.random.SeedSequence((root_seed, tag)).generate_state(1)[0])

    return sub
