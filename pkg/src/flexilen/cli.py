"""Command-line surface: generate, train, eval, probe, sweep.

Every command validates its full configuration before touching the
filesystem, echoes the effective seed into its output manifest, and exits
nonzero on any error. ``--deterministic`` forces fully serial execution
(execution is single-threaded throughout, so the flag is a recorded promise).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, run_config_to_flat
from .data import generate_from_config, load_dataset, save_dataset, split_scenes
from .evaluation import (
    evaluate,
    generality_sweep,
    ln_statistics_probe,
    pe_deviation_report,
    write_ln_report_csv,
    write_metrics,
    write_pe_report_csv,
    write_sweep_csv,
)
from .fln import route
from .training import (
    fit_normalizer,
    train_fln,
    train_finetune,
    train_isolated,
    train_joint,
    train_mixed,
)


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--deterministic", action="store_true", help="force serial execution")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def _build_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if getattr(args, "length", None) and getattr(args, "command", "") == "train":
        overrides["isolated_length"] = args.length
    return load_run_config(args.config, overrides)


def _load_scenes(args, cfg: RunConfig):
    if getattr(args, "data", None):
        scenes, _ = load_dataset(args.data)
        return scenes
    return generate_from_config(cfg.data, cfg.seed)


def cmd_generate(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    scenes = generate_from_config(cfg.data, cfg.seed)
    save_dataset(
        out,
        scenes,
        {
            "seed": cfg.seed,
            "dt": cfg.data.dt,
            "motion_mix": list(cfg.data.motion_mix),
            "noise_sigma": cfg.data.noise_sigma,
            "repulsion": cfg.data.repulsion,
            "obs_len": cfg.data.obs_len,
            "horizon": cfg.data.horizon,
            "n_scenes": cfg.data.n_scenes,
        },
    )
    agents = sum(s.n_agents for s in scenes)
    print(f"wrote {len(scenes)} scenes ({agents} agents) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    scenes = _load_scenes(args, cfg)
    split = split_scenes(scenes, cfg.data.train_frac, cfg.data.val_frac)
    normalizer = fit_normalizer(split, cfg.data.horizon)
    run_flat = run_config_to_flat(cfg)
    out.mkdir(parents=True, exist_ok=True)

    # atomic per-epoch snapshot: an interrupted run keeps the last completed epoch
    def epoch_hook(params, epoch):
        save_checkpoint(out / "checkpoint", params, run_flat, epoch=epoch + 1)

    strategy = cfg.train.strategy
    if strategy == "fln":
        params, log = train_fln(split, cfg, normalizer, epoch_hook=epoch_hook)
        outputs = [("checkpoint", params, log)]
    elif strategy == "isolated":
        params, log = train_isolated(
            split, cfg, cfg.train.isolated_length, normalizer, epoch_hook=epoch_hook
        )
        outputs = [("checkpoint", params, log)]
    elif strategy == "mixed":
        params, log = train_mixed(split, cfg, normalizer, epoch_hook=epoch_hook)
        outputs = [("checkpoint", params, log)]
    elif strategy == "finetune":
        params, log, pre = train_finetune(split, cfg, normalizer)
        save_checkpoint(out / "checkpoint_pretune", pre, run_flat, epoch=cfg.train.epochs)
        outputs = [("checkpoint", params, log)]
    else:  # joint
        models = train_joint(split, cfg, normalizer)
        outputs = [(f"checkpoint_h{h}", p, l) for h, (p, l) in models.items()]

    for name, params, log in outputs:
        save_checkpoint(out / name, params, run_flat, epoch=len(log.records))
        log.to_csv(out / f"{name}_log.csv")
        log.to_json(out / f"{name}_summary.json")
        final = log.records[-1]
        print(
            f"{name}: {len(log.records)} epochs, final total {final.total:.6f} "
            f"(reg {final.reg:.6f}, kl {final.kl:.6f})"
        )
    return 0


def cmd_eval(args) -> int:
    params, manifest, _ = load_checkpoint(args.checkpoint)
    cfg = load_run_config(None, dict(manifest.get("run_config") or {}))
    if args.seed is not None:
        cfg = load_run_config(None, {**run_config_to_flat(cfg), "seed": args.seed})
    scenes = _load_scenes(args, cfg)
    split = split_scenes(scenes, cfg.data.train_frac, cfg.data.val_frac)
    normalizer = fit_normalizer(split, cfg.data.horizon)
    k = args.samples or cfg.eval.samples
    metrics = evaluate(
        params, split.test, args.length, k, normalizer, sampling=cfg.eval.sampling, seed=cfg.seed
    )
    extra = {"seed": cfg.seed, "checkpoint": Path(args.checkpoint).name}
    if not params.is_single:
        extra["routed_branch"] = route(args.length, params.lengths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics", metrics, extra)
    branch_note = f" branch {extra['routed_branch']}" if "routed_branch" in extra else ""
    print(
        f"H'={args.length}{branch_note}: ADE_{k} {metrics.ade:.6f}  FDE_{k} {metrics.fde:.6f} "
        f"({metrics.scene_count} scenes)"
    )
    return 0


def _parse_lengths(spec: str) -> list[int]:
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(part) for part in spec.split(",") if part]


def cmd_sweep(args) -> int:
    params, manifest, _ = load_checkpoint(args.checkpoint)
    cfg = load_run_config(None, dict(manifest.get("run_config") or {}))
    scenes = _load_scenes(args, cfg)
    split = split_scenes(scenes, cfg.data.train_frac, cfg.data.val_frac)
    normalizer = fit_normalizer(split, cfg.data.horizon)
    lengths = _parse_lengths(args.lengths)
    k = args.samples or cfg.eval.samples
    rows = generality_sweep(
        params, split.test, lengths, k, normalizer, sampling=cfg.eval.sampling, seed=cfg.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", rows)
    (out / "sweep.json").write_text(
        json.dumps(
            {
                "seed": cfg.seed,
                "k": k,
                "rows": [
                    {"h_eval": r.h_eval, "ade": r.ade, "fde": r.fde, "branch": r.branch}
                    for r in rows
                ],
            },
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    for row in rows:
        print(f"H'={row.h_eval} branch {row.branch}: ADE {row.ade:.6f} FDE {row.fde:.6f}")
    return 0


def _branch_table(params, h: int):
    for branch, length in params.lengths.items():
        if length == h:
            table = params.pe_table(branch)
            if table is None:
                return None
            return table.data
    raise ConfigError(f"checkpoint has no branch of length {h} (has {params.lengths})")


def cmd_probe(args) -> int:
    out = Path(args.out)
    if args.kind == "pe":
        if args.checkpoint:
            params, _, _ = load_checkpoint(args.checkpoint[0])
            tables = (_branch_table(params, args.h1), _branch_table(params, args.h2))
            report = pe_deviation_report(
                params.cfg, args.h1, args.h2, tables=None if tables[0] is None else tables
            )
        else:
            cfg = load_run_config(args.config) if args.config else RunConfig()
            report = pe_deviation_report(cfg.backbone, args.h1, args.h2)
        out.mkdir(parents=True, exist_ok=True)
        write_pe_report_csv(out / f"pe_deviation_{args.h1}_{args.h2}.csv", report)
        (out / f"pe_deviation_{args.h1}_{args.h2}.json").write_text(
            json.dumps(
                {
                    "h1": args.h1,
                    "h2": args.h2,
                    "timesteps": int(report.distances.size),
                    "max_distance": float(report.distances.max()),
                    "distances": [float(d) for d in report.distances],
                },
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
        print(
            f"pe deviation H1={args.h1} H2={args.h2}: max {report.distances.max():.6f} "
            f"over {report.distances.size} timesteps"
        )
        return 0
    if args.kind == "ln":
        if not args.checkpoint:
            raise ConfigError("ln probe requires at least one --checkpoint")
        if args.length is None:
            raise ConfigError("ln probe requires --length")
        out.mkdir(parents=True, exist_ok=True)
        for index, ckpt in enumerate(args.checkpoint):
            params, manifest, _ = load_checkpoint(ckpt)
            cfg = load_run_config(None, dict(manifest.get("run_config") or {}))
            scenes = _load_scenes(args, cfg)
            split = split_scenes(scenes, cfg.data.train_frac, cfg.data.val_frac)
            normalizer = fit_normalizer(split, cfg.data.horizon)
            report = ln_statistics_probe(params, split.test, args.length, normalizer)
            write_ln_report_csv(out / f"ln_stats_{index}.csv", report)
            (out / f"ln_stats_{index}.json").write_text(
                json.dumps(
                    {
                        "checkpoint": Path(ckpt).name,
                        "length": report.length,
                        "branch": report.branch,
                        "sites": {
                            site: {
                                "mean": [float(v) for v in stats[:, 0]],
                                "std": [float(v) for v in stats[:, 1]],
                            }
                            for site, stats in sorted(report.sites.items())
                        },
                    },
                    indent=2,
                    sort_keys=True,
                ),
                encoding="utf-8",
            )
            print(f"ln probe [{index}] {ckpt}: {len(report.sites)} sites at H'={args.length}")
        return 0
    raise ConfigError(f"unknown probe kind {args.kind!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexilen",
        description="Observation-length-robust trajectory prediction laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    _add_shared(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train a model with a chosen strategy")
    _add_shared(p_train)
    p_train.add_argument("--data", help="dataset directory (default: generate in memory)")
    p_train.add_argument("--strategy", choices=["fln", "isolated", "mixed", "finetune", "joint"])
    p_train.add_argument("--length", type=int, help="observation length for strategy=isolated")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint at one length")
    _add_shared(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset directory")
    p_eval.add_argument("--length", type=int, required=True)
    p_eval.add_argument("--samples", type=int, help="best-of-K sample count")
    p_eval.set_defaults(func=cmd_eval)

    p_probe = sub.add_parser("probe", help="emit diagnostic reports")
    _add_shared(p_probe)
    p_probe.add_argument("kind", choices=["ln", "pe"])
    p_probe.add_argument("--checkpoint", action="append", default=[])
    p_probe.add_argument("--data", help="dataset directory")
    p_probe.add_argument("--length", type=int, help="observation length for the ln probe")
    p_probe.add_argument("--h1", type=int, help="first length for the pe probe")
    p_probe.add_argument("--h2", type=int, help="second length for the pe probe")
    p_probe.set_defaults(func=cmd_probe)

    p_sweep = sub.add_parser("sweep", help="evaluate a range of observation lengths")
    _add_shared(p_sweep)
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--data", help="dataset directory")
    p_sweep.add_argument("--lengths", required=True, help="e.g. '4..30' or '2,6,8'")
    p_sweep.add_argument("--samples", type=int)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "probe" and args.kind == "pe" and (args.h1 is None or args.h2 is None):
        parser.error("probe pe requires --h1 and --h2")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
