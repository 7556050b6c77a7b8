"""Batch experiment driver: assets -> policy -> configs -> attack -> eval -> report.

Every subcommand loads one RunConfig (defaults, optional --config file, then
--set overrides), writes a resolved-config snapshot next to its outputs, and
exits 0 only if all requested artifacts were written. Environment overrides
are limited to ADVTEX_OUT_DIR and ADVTEX_JOBS.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as at
from . import config as cf
from . import evaluate as ev
from . import geometry as geo
from . import policy as pol
from . import render as rd


def _load_cfg(args):
    cfg = cf.load_config(args.config) if args.config else cf.RunConfig()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        cf.apply_assignment(cfg, key.strip(), raw.strip())
    if os.environ.get("ADVTEX_OUT_DIR"):
        cfg.out_dir = os.environ["ADVTEX_OUT_DIR"]
    if os.environ.get("ADVTEX_JOBS"):
        cfg.jobs = int(os.environ["ADVTEX_JOBS"])
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    cf.validate(cfg)
    return cfg


def _prepare_out(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cf.write_snapshot(cfg, out / "config_resolved.txt")
    return out


def _intr(cfg):
    return rd.CameraIntrinsics.square(cfg.image_size)


def _policy_path(args, out):
    return Path(args.policy) if getattr(args, "policy", None) else out / "policy.bin"


def _configs_path(args, out):
    return Path(args.configs) if getattr(args, "configs", None) else out / "configs.json"


def _load_pool(path):
    with open(path) as fh:
        payload = json.load(fh)
    configs = [geo.scene_from_dict(d) for d in payload["configs"]]
    if not configs:
        raise ValueError(f"config pool in {path} is empty")
    return configs


# -- subcommands ---------------------------------------------------------------


def cmd_gen_assets(args):
    cfg = _load_cfg(args)
    out = _prepare_out(cfg) / "assets"
    out.mkdir(exist_ok=True)
    for kind, dims in rd.ADV_DIMS.items():
        mesh = geo.gen_assets(kind, dims)
        path = out / f"{kind}.obj"
        geo.save_obj(mesh, path)
        print(f"wrote {path} ({len(mesh.faces)} triangles)")
    return 0


def cmd_train_policy(args):
    cfg = _load_cfg(args)
    out = _prepare_out(cfg)
    sub = cf.seed_stream(cfg.seed, "policy")
    objects = rd.default_objects(cfg.adv_kind)
    arch = args.arch or cfg.policy.arch
    if arch not in pol.ARCHS:
        raise ValueError(f"unknown policy architecture {arch!r}")
    print(f"collecting {cfg.policy.demos} expert demonstration episodes ...")
    demos = pol.collect_demos(
        cfg.policy.demos,
        sub(f"demos-{arch}"),
        objects,
        _intr(cfg),
        rd.default_textures(),
        workspace=cf.make_workspace(cfg),
        r_range=(cfg.scenes.r_min, cfg.scenes.r_max),
        horizon=cfg.eval.horizon,
        d_success=cfg.eval.d_success,
        explore_prob=cfg.policy.explore_prob,
        k_p=cfg.policy.k_p,
    )
    print(f"training arch {arch!r} on {len(demos[0])} frames ...")
    net, history = pol.train_bc(
        demos,
        cfg.policy.epochs,
        cfg.policy.lr,
        sub(f"train-{arch}"),
        arch=arch,
        resolution=cfg.image_size,
        batch_size=cfg.policy.batch_size,
    )
    ckpt = Path(args.policy) if args.policy else out / "policy.bin"
    pol.save_policy(net, ckpt)
    log = ckpt.with_name(ckpt.stem + "_train_log.csv")
    with open(log, "w") as fh:
        fh.write("epoch,train_mse\n")
        for i, loss in enumerate(history):
            fh.write(f"{i},{loss!r}\n")
    print(f"wrote {ckpt} and {log} (final train MSE {history[-1]:.6g})")
    return 0


def cmd_filter_configs(args):
    cfg = _load_cfg(args)
    out = _prepare_out(cfg)
    net = pol.load_policy(_policy_path(args, out))
    sub = cf.seed_stream(cfg.seed, "scenes")
    candidates = at.generate_candidates(
        cfg.scenes.candidates,
        sub("candidates"),
        workspace=cf.make_workspace(cfg),
        r_range=(cfg.scenes.r_min, cfg.scenes.r_max),
    )
    kept = at.filter_configs(
        candidates,
        net,
        rd.default_objects(cfg.adv_kind),
        _intr(cfg),
        horizon=cfg.eval.horizon,
        d_success=cfg.eval.d_success,
    )
    path = _configs_path(args, out)
    with open(path, "w") as fh:
        json.dump(
            {"candidates": len(candidates), "configs": [geo.scene_to_dict(c) for c in kept]},
            fh,
            indent=1,
        )
    print(f"kept {len(kept)}/{len(candidates)} task-feasible configs -> {path}")
    return 0


def cmd_attack(args):
    cfg = _load_cfg(args)
    if args.mode:
        cfg.attack.mode = args.mode
    if args.loss:
        cfg.attack.loss = args.loss
    cf.validate(cfg)
    out = _prepare_out(cfg)
    net = pol.load_policy(_policy_path(args, out))
    configs = _load_pool(_configs_path(args, out))
    objects = rd.default_objects(cfg.adv_kind)
    setup = at.AttackSetup(
        net=net,
        objects=objects,
        intr=_intr(cfg),
        weights=cf.make_weights(cfg),
        schedule=cf.make_schedule(cfg),
        loss_mode=cfg.attack.loss,
        n_env=cfg.attack.n_env,
        rollout_k=cfg.attack.rollout_k,
    )
    pool = at.build_pool(configs, objects)
    sub = cf.seed_stream(cfg.seed, "attack")
    texture, history = at.run_attack(
        setup,
        pool,
        sub(f"run-{cfg.attack.mode}-{cfg.attack.loss}"),
        texture_shape=(cfg.attack.texture_size, cfg.attack.texture_size),
        checkpoint_every=cfg.attack.checkpoint_every,
        out_dir=str(out),
    )
    stem = out / (args.texture_stem or "texture")
    rd.save_texture(texture, stem)
    at.write_attack_log(history, out / "attack_log.csv")
    skipped = sum(1 for row in history if row["grad_norm"] < 1e-12)
    print(
        f"attack finished: {len(history)} iterations ({skipped} skipped), "
        f"texture -> {stem}.ppm/.npy"
    )
    return 0


def _eval_every(cfg, args, out, net, configs, texture):
    """All requested evaluation rows plus their episode logs."""
    sub = cf.seed_stream(cfg.seed, "eval")
    intr = _intr(cfg)
    objects = rd.default_objects(cfg.adv_kind)
    common = dict(
        objects=objects,
        intr=intr,
        horizon=cfg.eval.horizon,
        d_success=cfg.eval.d_success,
        jobs=cfg.jobs,
    )
    conditions = [c.strip() for c in args.conditions.split(",") if c.strip()]
    rows, written = [], []

    def add(label, report, results, tex):
        rows.append(ev.metrics_row(label, report, cfg.seed, ev.texture_hash(tex)))
        safe = label.replace(":", "_").replace("/", "_")
        path = out / f"episodes_{safe}.jsonl"
        ev.write_episode_logs(results, path)
        written.append(path)

    textures = {
        "attacked": texture,
        "benign": geo.TextureMap.uniform(
            cfg.attack.texture_size, cfg.attack.texture_size, 0.5
        ),
        "random": geo.TextureMap.random(
            cfg.attack.texture_size, cfg.attack.texture_size, sub("random-texture")
        ),
    }
    for label in conditions:
        if label not in textures:
            raise ValueError(f"unknown eval condition {label!r}; pick from {tuple(textures)}")
        report, results = ev.evaluate_texture(
            configs, net, textures[label], cfg.eval.episodes, sub("episodes"), **common
        )
        add(label, report, results, textures[label])

    for kind, magnitude in cfg.eval.perturbations:
        report, results = ev.evaluate_texture(
            configs,
            net,
            texture,
            cfg.eval.episodes,
            sub("episodes"),
            perturbation=(kind, magnitude),
            **common,
        )
        add(f"attacked+{kind}:{magnitude:g}", report, results, texture)

    if args.transfer:
        target = pol.load_policy(args.transfer)
        report, results = ev.transfer_check(
            texture, net, target, configs, cfg.eval.episodes, sub("transfer"), **common
        )
        add("transfer", report, results, texture)
    return rows, written


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = _prepare_out(cfg)
    net = pol.load_policy(_policy_path(args, out))
    configs = _load_pool(_configs_path(args, out))
    texture_stem = args.texture or str(out / "texture")
    texture = rd.load_texture(texture_stem)
    rows, written = _eval_every(cfg, args, out, net, configs, texture)

    if args.baseline_2d:
        for kind in ("thin_patch", "cuboid"):
            result = ev.baseline_2d(
                net,
                cfg.seed,
                adv_kind=kind,
                n_candidates=cfg.scenes.candidates,
                n_episodes=cfg.eval.episodes,
                intr=_intr(cfg),
                weights=cf.make_weights(cfg),
                schedule=cf.make_schedule(cfg),
                texture_shape=(cfg.attack.texture_size, cfg.attack.texture_size),
                horizon=cfg.eval.horizon,
                d_success=cfg.eval.d_success,
            )
            rows.append(
                ev.metrics_row(
                    f"baseline-{kind}",
                    result["overall"],
                    cfg.seed,
                    ev.texture_hash(result["texture"]),
                )
            )
            bin_path = out / f"baseline_{kind}_phi_bins.csv"
            with open(bin_path, "w") as fh:
                fh.write("phi_lo_deg,phi_hi_deg,episodes,ASR,T_ASR,E_trans_m,E_rot_rad\n")
                for row in result["bins"]:
                    cells = [
                        row["phi_lo_deg"],
                        row["phi_hi_deg"],
                        row["episodes"],
                        row["asr"],
                        row["t_asr"],
                        row["e_trans"],
                        row["e_rot"],
                    ]
                    fh.write(",".join("" if c is None else repr(float(c)) if isinstance(c, float) else str(c) for c in cells) + "\n")
            written.append(bin_path)

    path = out / "metrics.csv"
    ev.write_metrics_csv(rows, path)
    for row in rows:
        print(
            f"{row['condition']:>24}: ASR={row['ASR']:.3f} T_ASR={row['T_ASR']:.3f} "
            f"E_trans={row['E_trans_m']:.4f} E_rot={row['E_rot_rad']:.4f} "
            f"({row['episodes']} episodes)"
        )
    print(f"wrote {path} and {len(written)} episode/bin logs")
    return 0


def cmd_report(args):
    rows = []
    for path in args.metrics:
        label = Path(path).parent.name or "."
        for row in ev.read_metrics_csv(path):
            rows.append({**row, "condition": f"{label}/{row['condition']}"})
    if not rows:
        raise ValueError("no metrics rows found in the given files")
    out = Path(args.out_stem)
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_metrics_csv(rows, out.with_suffix(".csv"))
    cols = ("condition", "episodes", "ASR", "T_ASR", "E_trans_m", "E_rot_rad")

    def fmt(row, c):
        v = row[c]
        try:
            return f"{float(v):.4f}" if c not in ("condition", "episodes") else str(v)
        except (TypeError, ValueError):
            return str(v)

    widths = {c: max(len(c), *(len(fmt(r, c)) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(fmt(r, c).ljust(widths[c]) for c in cols) for r in rows]
    table = "\n".join(lines) + "\n"
    out.with_suffix(".txt").write_text(table)
    print(table, end="")
    print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.txt')}")
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advtex",
        description="Viewpoint-consistent adversarial texture attacks on a visuomotor reach policy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="run configuration file (key = value lines)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override one config field (repeatable)",
        )
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--jobs", type=int, help="worker process cap for evaluation")
        return p

    add("gen-assets", cmd_gen_assets, "write the OBJ meshes for all object kinds")

    p = add("train-policy", cmd_train_policy, "behavior-clone the scripted expert")
    p.add_argument("--arch", help="policy architecture id (default from config)")
    p.add_argument("--policy", help="checkpoint path (default <out>/policy.bin)")

    p = add("filter-configs", cmd_filter_configs, "keep scenes the benign policy solves")
    p.add_argument("--policy", help="policy checkpoint (default <out>/policy.bin)")
    p.add_argument("--configs", help="output pool path (default <out>/configs.json)")

    p = add("attack", cmd_attack, "optimize the adversarial texture")
    p.add_argument("--policy", help="policy checkpoint (default <out>/policy.bin)")
    p.add_argument("--configs", help="config pool (default <out>/configs.json)")
    p.add_argument("--mode", choices=at.SCHEDULE_MODES, help="curriculum ablation mode")
    p.add_argument("--loss", choices=at.LOSS_MODES, help="objective variant")
    p.add_argument("--texture-stem", help="output texture stem (default 'texture')")

    p = add("eval", cmd_eval, "run evaluation episodes and write metrics")
    p.add_argument("--policy", help="policy checkpoint (default <out>/policy.bin)")
    p.add_argument("--configs", help="config pool (default <out>/configs.json)")
    p.add_argument("--texture", help="texture stem to evaluate (default <out>/texture)")
    p.add_argument(
        "--conditions",
        default="attacked,benign,random",
        help="comma list from {attacked,benign,random}",
    )
    p.add_argument("--transfer", help="target policy checkpoint for the black-box check")
    p.add_argument(
        "--baseline-2d",
        action="store_true",
        help="also run the thin-patch vs cuboid attack comparison (slow)",
    )

    p = sub.add_parser("report", help="merge metrics CSVs into one comparison table")
    p.set_defaults(func=cmd_report)
    p.add_argument("metrics", nargs="+", help="metrics.csv files to merge")
    p.add_argument("--out-stem", default="report", help="output stem for .csv/.txt")

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
