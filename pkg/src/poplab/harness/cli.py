"""Command-line entry points.

Every command writes into its own run directory (``--out`` or an
auto-named ``runs/<UTC stamp>-<command>/``) and drops a ``.meta.json``
sidecar there recording the exact argv, the resolved configuration and
a sha256 of each input file, so any artifact can be traced back to the
invocation that produced it.

    poplab gen-data --out runs/data [--config c.json] [--seed 3] ...
    poplab train    --stage teacher --data scenes.jsonl --out runs/t
    poplab train    --stage ssl     --data scenes.jsonl \
                    --init-checkpoint runs/t/checkpoint.json --out runs/s
    poplab train    --stage distill --data scenes.jsonl \
                    --teacher-checkpoint runs/t/checkpoint.json \
                    --init-checkpoint runs/s/checkpoint.json --out runs/d
    poplab sweep    --checkpoint runs/d/checkpoint.json --data eval.jsonl
    poplab ablate   --data train.jsonl --eval-data eval.jsonl
    poplab simulate --suite standard --predictor oracle
    poplab plot     --report runs/sweep/report.csv
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from ..datagen import generate_dataset
from ..errors import ConfigurationError, ParameterError
from ..metrics import observation_sweep, write_report_csv
from ..predictor import ModelConfig, Predictor
from ..scene import load_scenes, save_scenes
from ..simulator import (
    ModelSim,
    OracleSim,
    SimConfig,
    aggregate,
    occlusion_suite,
    run_benchmark,
    standard_suite,
    write_benchmark_csv,
    write_trace,
)
from ..training import (
    STAGES,
    StageConfig,
    train_stage,
    write_ablation_csv,
    write_training_log,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config
from .plots import obs_curve_svg, save_svg, trace_svg


# -- run-directory plumbing -----------------------------------------------------


def _utc_stamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).strftime(
        "%Y%m%dT%H%M%SZ")


def _out_dir(args, command: str) -> str:
    out = args.out or os.path.join("runs", f"{_utc_stamp()}-{command}")
    os.makedirs(out, exist_ok=True)
    return out


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_meta(out: str, command: str, argv, cfg: RunConfig | None,
                inputs: dict[str, str | None]) -> None:
    meta = {
        "command": command,
        "argv": list(argv),
        "config": cfg.as_dict() if cfg is not None else None,
        "inputs": {k: {"path": v, "sha256": _sha256_file(v)}
                   for k, v in inputs.items() if v is not None},
    }
    with open(os.path.join(out, ".meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for key in ("seed", "n_scenes", "t_h", "t_f", "strategy", "k_plan"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return load_config(getattr(args, "config", None), overrides)


def _model_from_checkpoint(ckpt) -> Predictor:
    cfg = ModelConfig(**ckpt.model_config)
    model = Predictor(cfg, seed=0)
    model.store.load_arrays(ckpt.params)
    return model


def _match_data_shape(cfg: RunConfig, scenes) -> RunConfig:
    """The model's history/future lengths must equal the data's; take
    them from the scenes rather than trusting the config to agree."""
    t_h = scenes[0].agents[0].t_h
    t_f = scenes[0].t_f
    if (cfg.t_h, cfg.t_f) == (t_h, t_f):
        return cfg
    return dataclasses.replace(cfg, t_h=t_h, t_f=t_f)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args, "gen-data")
    scenes = generate_dataset(cfg.gen_config(), cfg.seed)
    path = os.path.join(out, "scenes.jsonl")
    save_scenes(path, scenes)
    save_config(cfg, os.path.join(out, "config.json"))
    _write_meta(out, "gen-data", argv, cfg, {})
    print(f"wrote {len(scenes)} scenes -> {path}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args, f"train-{args.stage}")
    scenes = load_scenes(args.data)
    if not scenes:
        raise ConfigurationError(f"no scenes in {args.data}")
    cfg = _match_data_shape(cfg, scenes)

    teacher = None
    teacher_ckpt = None
    if args.teacher_checkpoint:
        teacher_ckpt = load_checkpoint(args.teacher_checkpoint)
        teacher = _model_from_checkpoint(teacher_ckpt)

    parent_hash = None
    if args.stage in ("teacher", "scratch"):
        model = Predictor(cfg.model_config(), seed=cfg.seed)
    elif args.stage == "ssl":
        if not args.init_checkpoint:
            raise ConfigurationError(
                "ssl stage warm-starts from a pre-trained model "
                "(pass --init-checkpoint)")
        init = load_checkpoint(args.init_checkpoint)
        model = _model_from_checkpoint(init).add_recon_head(seed=cfg.seed + 1)
        parent_hash = init.content_hash
    else:  # distill; train_stage rejects a missing teacher itself
        if args.init_checkpoint:
            init = load_checkpoint(args.init_checkpoint)
            model = _model_from_checkpoint(init)
            parent_hash = init.content_hash
        elif teacher is not None:
            model = teacher.copy()
            parent_hash = teacher_ckpt.content_hash
        else:
            model = None

    epochs = {"teacher": cfg.epochs_teacher, "scratch": cfg.epochs_teacher,
              "ssl": cfg.epochs_ssl, "distill": cfg.epochs_distill}[args.stage]
    stage_cfg = StageConfig(args.stage, epochs=epochs,
                            batch_size=cfg.batch_size, seed=cfg.seed,
                            lr=cfg.lr)
    res = train_stage(model, scenes, stage_cfg, teacher=teacher,
                      parent_hash=parent_hash)

    ckpt_path = os.path.join(out, "checkpoint.json")
    save_checkpoint(res.checkpoint.params, res.checkpoint, ckpt_path)
    write_training_log(res.log, os.path.join(out, "training_log.csv"))
    save_config(cfg, os.path.join(out, "config.json"))
    _write_meta(out, "train", argv, cfg, {
        "data": args.data,
        "teacher_checkpoint": args.teacher_checkpoint,
        "init_checkpoint": args.init_checkpoint,
    })
    last = res.epoch_means[-1]["total"] if res.epoch_means else float("nan")
    print(f"stage {args.stage}: {epochs} epochs on {len(scenes)} scenes, "
          f"final mean loss {last:.4f}")
    print(f"checkpoint -> {ckpt_path}")
    return 0


def _parse_lengths(spec: str, t_h: int):
    lengths = []
    for tok in spec.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok == "random":
            lengths.append("random")
        elif tok == "half":
            lengths.append(t_h // 2)
        elif tok == "full":
            lengths.append(t_h)
        else:
            try:
                lengths.append(int(tok))
            except ValueError:
                raise ParameterError(
                    f"bad observation length {tok!r}; want an int, "
                    "'half', 'full' or 'random'")
    if not lengths:
        raise ParameterError("no observation lengths given")
    return lengths


def cmd_sweep(args, argv) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args, "sweep")
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(ckpt)
    scenes = load_scenes(args.data)
    t_h = model.config.t_h
    lengths = _parse_lengths(args.lengths, t_h)
    report = observation_sweep(model, scenes, lengths,
                               ks=tuple(sorted({1, cfg.k_eval})),
                               seed=cfg.seed)
    path = os.path.join(out, "report.csv")
    write_report_csv(report, path)
    _write_meta(out, "sweep", argv, cfg,
                {"checkpoint": args.checkpoint, "data": args.data})
    for row in report.rows:
        print(f"obs={row['obs_setting']:>6}  k={row['k']}  "
              f"minade={row['minade']:.3f}  minfde={row['minfde']:.3f}  "
              f"mr={row['mr']:.3f}")
    print(f"report -> {path}")
    return 0


def cmd_ablate(args, argv) -> int:
    from ..training import run_ablation  # heavy; keep import local

    cfg = _config_from_args(args)
    out = _out_dir(args, "ablate")
    train_scenes = load_scenes(args.data)
    if not train_scenes:
        raise ConfigurationError(f"no scenes in {args.data}")
    cfg = _match_data_shape(cfg, train_scenes)
    eval_scenes = load_scenes(args.eval_data) if args.eval_data else None
    if eval_scenes is None:
        n_eval = max(1, len(train_scenes) // 5)
        eval_scenes = train_scenes[-n_eval:]
        train_scenes = train_scenes[:-n_eval]
    strategies = tuple(s.strip() for s in args.strategies.split(",")
                       if s.strip())
    path = os.path.join(out, "ablation.csv")
    rows = run_ablation(train_scenes, eval_scenes, cfg.model_config(),
                        strategies=strategies, seed=cfg.seed,
                        budget=cfg.budget(), batch_size=cfg.batch_size,
                        lr=cfg.lr, k=cfg.k_eval, out_csv=path)
    _write_meta(out, "ablate", argv, cfg, {
        "data": args.data, "eval_data": args.eval_data})
    for row in rows:
        print(f"{row['strategy']:<22} "
              f"minade@full={row['minade_full']:.3f}  "
              f"minade@1={row['minade_1']:.3f}  "
              f"minade@random={row['minade_random']:.3f}")
    print(f"ablation table -> {path}")
    return 0


def cmd_simulate(args, argv) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args, "simulate")
    suite = standard_suite() if args.suite == "standard" else occlusion_suite()
    sim_cfg = SimConfig(k_plan=cfg.k_plan)

    if args.predictor == "oracle":
        predictors = {"oracle": OracleSim()}
        inputs: dict = {}
    else:
        if not args.checkpoint:
            raise ConfigurationError(
                "the model predictor needs --checkpoint")
        model = _model_from_checkpoint(load_checkpoint(args.checkpoint))
        predictors = {"model": ModelSim(model)}
        inputs = {"checkpoint": args.checkpoint}

    trace_dir = os.path.join(out, "traces")
    os.makedirs(trace_dir, exist_ok=True)

    def keep(method, trace):
        name = f"{method}-{trace.scenario}-seed{trace.seed}.jsonl"
        write_trace(trace, os.path.join(trace_dir, name))

    seeds = tuple(range(cfg.sim_seeds))
    rows = run_benchmark(suite, predictors, sim_cfg, seeds=seeds,
                         trace_hook=keep)
    table = aggregate(rows)
    path = os.path.join(out, "benchmark.csv")
    write_benchmark_csv(rows, path)
    _write_meta(out, "simulate", argv, cfg, inputs)
    for row in table:
        print(f"{row['Method']:<12} P-K={row['P-K']}  "
              f"DIST={row['DIST']:.1f}  JERK={row['JERK']:.3f}  "
              f"RC={row['RC']:.3f}  CT={row['CT']}  RCT={row['RCT']}")
    print(f"{len(rows)} runs; benchmark -> {path}; traces -> {trace_dir}/")
    return 0


def cmd_plot(args, argv) -> int:
    out = _out_dir(args, "plot")
    if (args.report is None) == (args.trace is None):
        raise ParameterError("pass exactly one of --report / --trace")

    if args.report:
        from ..metrics import read_report_csv

        report = read_report_csv(args.report)
        label = os.path.splitext(os.path.basename(args.report))[0]
        rows = [r for r in report.rows if r["k"] == args.k]
        if not rows:
            raise ParameterError(
                f"{args.report} has no rows with k={args.k}; "
                f"ks present: {sorted({r['k'] for r in report.rows})}")
        svg = obs_curve_svg({label: rows}, metric=args.metric)
        path = os.path.join(out, f"obs-curve-{args.metric}.svg")
        inputs = {"report": args.report}
    else:
        from ..simulator import read_trace

        trace = read_trace(args.trace)
        svg = trace_svg(trace)
        stem = os.path.splitext(os.path.basename(args.trace))[0]
        path = os.path.join(out, f"trace-{stem}.svg")
        inputs = {"trace": args.trace}

    save_svg(svg, path)
    _write_meta(out, "plot", argv, None, inputs)
    print(f"plot -> {path}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="poplab",
        description="trajectory-prediction lab: data generation, staged "
                    "training, open-loop evaluation and closed-loop driving")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", default=None,
                        help="run directory (default runs/<stamp>-<cmd>)")
        if config:
            sp.add_argument("--config", default=None,
                            help="flat JSON config file")
            sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-data", help="sample a synthetic scene dataset")
    common(g)
    g.add_argument("--n-scenes", type=int, default=None)
    g.add_argument("--t-h", type=int, default=None, dest="t_h")
    g.add_argument("--t-f", type=int, default=None, dest="t_f")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", required=True, choices=list(STAGES))
    t.add_argument("--data", required=True, help="scenes.jsonl")
    t.add_argument("--teacher-checkpoint", default=None,
                   help="frozen teacher (distill stage)")
    t.add_argument("--init-checkpoint", default=None,
                   help="warm-start weights (ssl/distill stages)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep",
                       help="evaluate a checkpoint across observation lengths")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="held-out scenes.jsonl")
    s.add_argument("--lengths", default="1,half,full,random",
                   help="comma list: ints, 'half', 'full', 'random'")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate",
                       help="train strategy variants and tabulate them")
    common(a)
    a.add_argument("--data", required=True, help="training scenes.jsonl")
    a.add_argument("--eval-data", default=None,
                   help="held-out scenes (default: last fifth of --data)")
    a.add_argument("--strategies",
                   default="scratch,scratch+ssl,scratch+distill,"
                           "scratch+ssl+distill")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("simulate", help="closed-loop driving benchmark")
    common(m)
    m.add_argument("--suite", default="standard",
                   choices=("standard", "occlusion"))
    m.add_argument("--predictor", default="oracle",
                   choices=("oracle", "model"))
    m.add_argument("--checkpoint", default=None,
                   help="predictor weights (required for --predictor model)")
    m.add_argument("--k-plan", type=int, default=None, dest="k_plan")
    m.set_defaults(func=cmd_simulate)

    pl = sub.add_parser("plot", help="render a report or trace to SVG")
    common(pl, config=False)
    pl.add_argument("--report", default=None, help="report.csv to plot")
    pl.add_argument("--trace", default=None, help="trace .jsonl to plot")
    pl.add_argument("--metric", default="minade",
                    choices=("minade", "minfde", "mr", "brier_minfde"))
    pl.add_argument("--k", type=int, default=6)
    pl.set_defaults(func=cmd_plot)

    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (ConfigurationError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
