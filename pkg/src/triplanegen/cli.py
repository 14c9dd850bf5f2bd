"""Command-line entry point.

Subcommands: gen-prompts, train, render, eval, gradcheck.  Configuration
precedence is flags > TOML config file > built-in defaults; every run is
deterministic given --seed on synthetic-oracle paths.  Exit codes: 0 success,
2 usage error, 3 missing input, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_ORACLE = 4


def _set_threads(argv):
    """Cap numeric worker threads; must happen before numpy spins up pools."""
    if "--threads" in argv:
        n = argv[argv.index("--threads") + 1]
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(int(n))


def _load_toml(path):
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _merge_config(args, argv, config_keys):
    """flags > TOML > defaults; only keys absent from the command line are
    overridden by the config file."""
    if not getattr(args, "config", None):
        return args
    if not os.path.exists(args.config):
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        sys.exit(EXIT_MISSING)
    table = _load_toml(args.config)
    for key, value in table.items():
        dest = key.replace("-", "_")
        if dest not in config_keys:
            continue
        flag = "--" + dest.replace("_", "-")
        if flag not in argv:
            setattr(args, dest, value)
    return args


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what):
    if not os.path.exists(path):
        print(f"error: {what} not found: {path}", file=sys.stderr)
        sys.exit(EXIT_MISSING)


def _make_oracle(spec, records):
    from .guidance import DiffusionSchedule, RemoteOracle, SyntheticOracle
    if spec == "synthetic":
        return SyntheticOracle(records, DiffusionSchedule())
    if spec == "remote" or spec.startswith("remote:"):
        url = spec[len("remote:"):] if spec.startswith("remote:") else None
        try:
            return RemoteOracle(url)
        except Exception as e:
            print(f"error: cannot reach oracle: {e}", file=sys.stderr)
            sys.exit(EXIT_ORACLE)
    print(f"error: unknown oracle {spec!r} (use synthetic or remote[:url])",
          file=sys.stderr)
    sys.exit(EXIT_USAGE)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_prompts(args, parser):
    from .prompts import gen_animals, gen_portraits, split, write_jsonl
    if args.set == "animals":
        records = gen_animals()
    elif args.set == "portraits":
        records = gen_portraits()
    else:
        parser.error(f"unknown prompt set {args.set!r}")
    split(records, train_frac=args.train_frac, seed=args.seed)
    write_jsonl(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_train(args, parser):
    import numpy as np

    from .conditioner import desk_decoder_config, paper_decoder_config
    from .guidance import GuidanceConfig, OracleError
    from .prompts import read_jsonl
    from .trainer import TrainConfig, Trainer, load_trainer, save_checkpoint

    _require(args.data, "dataset")
    records = read_jsonl(args.data)
    oracle = _make_oracle(args.oracle, records)
    os.makedirs(args.out, exist_ok=True)

    if args.resume:
        _require(args.resume, "checkpoint")
        trainer = load_trainer(args.resume, records, oracle)
        if args.steps > trainer.cfg.total_steps:
            trainer.cfg.total_steps = args.steps
        cfg = trainer.cfg
    else:
        cfg = TrainConfig(
            lr=args.lr, batch_size=args.batch, total_steps=args.steps,
            render_hw=args.hw, seed=args.seed, clip_weight=args.clip_weight,
            guidance=GuidanceConfig(w_guidance=args.guidance_weight,
                                    cfg_only=args.cfg_only),
            anneal=(args.alpha_start, args.anneal_fraction),
            n_uniform=args.n_uniform, n_importance=args.n_importance,
            shading=args.shading)
        dcfg = (paper_decoder_config() if args.decoder == "paper"
                else desk_decoder_config())
        trainer = Trainer(records, cfg, dcfg, oracle)

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    final_path = os.path.join(args.out, f"ckpt_{cfg.total_steps:06d}")
    manifest = {
        "config": {"train": _jsonable(cfg), "decoder": _jsonable(trainer.decoder_cfg)},
        "dataset": {"path": os.path.abspath(args.data),
                    "sha256": _sha256(args.data), "records": len(records)},
        "seed": cfg.seed,
        "oracle": args.oracle,
        "metrics_path": os.path.abspath(metrics_path),
        "checkpoint_paths": [os.path.abspath(final_path)],
        "resumed_from": os.path.abspath(args.resume) if args.resume else None,
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    mode = "a" if args.resume else "w"
    t0 = time.time()
    try:
        with open(metrics_path, mode, encoding="utf-8") as mf:
            trainer.run(metrics_file=mf,
                        checkpoint_every=args.checkpoint_every,
                        checkpoint_dir=args.out if args.checkpoint_every else None,
                        log_every=args.log_every)
    except OracleError as e:
        print(f"error: oracle failure: {e}", file=sys.stderr)
        return EXIT_ORACLE
    save_checkpoint(final_path, trainer)
    print(f"trained to step {trainer.step} in {time.time() - t0:.1f}s; "
          f"final checkpoint {final_path}")
    return EXIT_OK


def _jsonable(obj):
    from dataclasses import asdict, is_dataclass
    if is_dataclass(obj):
        obj = asdict(obj)
    return json.loads(json.dumps(obj, default=lambda o: list(o)
                                 if hasattr(o, "__iter__") else str(o)))


def cmd_render(args, parser):
    import numpy as np

    from .imageio import save_hdr, save_png
    from .prompts import read_jsonl
    from .renderer import CameraPose
    from .trainer import load_trainer

    _require(args.ckpt, "checkpoint")
    records = read_jsonl(args.data) if args.data else []
    trainer = load_trainer(args.ckpt, records, oracle=None)
    os.makedirs(args.out, exist_ok=True)

    t0 = time.time()
    tp, P = trainer.decode_triplane(args.prompt, style_seed=args.style_seed)
    print(f"decoded triplane in {(time.time() - t0) * 1000.0:.1f} ms")

    slug = "".join(c if c.isalnum() else "_" for c in args.prompt)[:48]
    from .renderer import AnnealState, render
    for i in range(args.views):
        az = 360.0 * i / args.views
        pose = CameraPose(polar=90.0, azimuth=az, radius=3.3, fov=75.0)
        out = render(tp, P, pose, args.hw, args.hw, trainer.anneal,
                     shading=args.shading, n_uniform=trainer.cfg.n_uniform,
                     n_importance=trainer.cfg.n_importance)
        img = np.clip(out.rgb.data, 0.0, 1.0)
        path = os.path.join(args.out, f"{slug}_az{int(az):03d}.png")
        save_png(path, img)
        if args.hdr:
            save_hdr(path[:-4] + ".f32", out.rgb.data)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args, parser):
    from .evalkit import clip_rp, evaluate, views_pp, write_curve_csv
    from .guidance import DownsampleFeature, OracleError
    from .prompts import read_jsonl
    from .trainer import load_trainer, read_checkpoint

    _require(args.data, "dataset")
    records = read_jsonl(args.data)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    if not records:
        print("error: no records selected", file=sys.stderr)
        return EXIT_USAGE
    feature_oracle = DownsampleFeature()

    def report_for(ckpt_path):
        trainer = load_trainer(ckpt_path, records, oracle=None,
                               feature_oracle=feature_oracle)

        def render_fn(rec, pose, hw):
            return trainer.render_view(rec, pose, hw)

        header, _ = read_checkpoint(ckpt_path)
        batch = header["config"]["train"]["batch_size"]
        try:
            return evaluate(render_fn, records, feature_oracle,
                            iterations=header["step"], batch_size=batch,
                            views=args.views, hw=args.hw)
        except OracleError as e:
            print(f"error: oracle failure: {e}", file=sys.stderr)
            sys.exit(EXIT_ORACLE)

    if args.curve:
        names = sorted(n for n in os.listdir(args.curve)
                       if n.startswith("ckpt_"))
        if not names:
            print(f"error: no checkpoints under {args.curve}", file=sys.stderr)
            return EXIT_MISSING
        curve = []
        last = None
        for name in names:
            rep = report_for(os.path.join(args.curve, name))
            curve.append((rep.views_pp, rep.clip_rp))
            last = rep
        last.curve = curve
        if args.curve_csv:
            write_curve_csv(args.curve_csv, curve)
        report = last
    else:
        if not args.ckpt:
            parser.error("eval needs --ckpt or --curve")
        _require(args.ckpt, "checkpoint")
        report = report_for(args.ckpt)

    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args, parser):
    import numpy as np

    from .gradsuite import run_suite

    dtype = np.float64 if args.f64 else np.float32
    tol = args.tol if args.tol is not None else (1e-6 if args.f64 else 1e-3)
    eps = 1e-5 if args.f64 else 1e-4
    t0 = time.time()

    def progress(name, err):
        status = "ok" if err <= tol else "FAIL"
        print(f"  {name:32s} max rel err {err:.3e}  {status}")

    # the composed pipeline needs a smaller step in f64: truncation error
    # on its curviest parameters dominates before roundoff does
    report = run_suite(cases_per_primitive=args.cases, tol=tol, eps=eps,
                       dtype=dtype, inject_fault=args.inject_fault,
                       composed_eps=3e-6 if args.f64 else None,
                       progress=progress)
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"{verdict}: {len(report['primitives'])} checks, tol {tol:g}, "
          f"{time.time() - t0:.1f}s")
    return EXIT_OK if report["passed"] else 1


# ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="triplanegen",
                                description="Feedforward text-to-3D at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-prompts", help="generate a prompt dataset")
    g.add_argument("--set", required=True, choices=["animals", "portraits"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-frac", type=float, default=0.6)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_prompts, config_keys=set())

    t = sub.add_parser("train", help="run amortized SDS training")
    t.add_argument("--data", required=True)
    t.add_argument("--oracle", default="synthetic")
    t.add_argument("--config", help="TOML config file (flags take precedence)")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--hw", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--clip-weight", type=float, default=0.0)
    t.add_argument("--guidance-weight", type=float, default=100.0)
    t.add_argument("--cfg-only", action="store_true")
    t.add_argument("--alpha-start", type=float, default=0.5)
    t.add_argument("--anneal-fraction", type=float, default=0.8)
    t.add_argument("--n-uniform", type=int, default=32)
    t.add_argument("--n-importance", type=int, default=0)
    t.add_argument("--shading", default="albedo",
                   choices=["albedo", "lambertian", "textureless"])
    t.add_argument("--decoder", default="desk", choices=["desk", "paper"])
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=0)
    t.add_argument("--resume")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train, config_keys={
        "steps", "batch", "lr", "hw", "seed", "clip_weight", "guidance_weight",
        "cfg_only", "alpha_start", "anneal_fraction", "n_uniform",
        "n_importance", "shading", "decoder", "checkpoint_every", "oracle"})

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--prompt", required=True)
    r.add_argument("--data", help="dataset JSONL (optional, for cached embeddings)")
    r.add_argument("--views", type=int, default=4)
    r.add_argument("--hw", type=int, default=256)
    r.add_argument("--out", default=".")
    r.add_argument("--shading", default="albedo",
                   choices=["albedo", "lambertian", "textureless"])
    r.add_argument("--style-seed", type=int)
    r.add_argument("--hdr", action="store_true",
                   help="also dump raw float32 images")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_render, config_keys=set())

    e = sub.add_parser("eval", help="compute views-pp and retrieval metrics")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="all", choices=["all", "train", "test"])
    e.add_argument("--views", type=int, default=4)
    e.add_argument("--hw", type=int, default=64)
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--curve", help="replay all checkpoints in this directory")
    e.add_argument("--curve-csv", help="write the convergence curve as CSV")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval, config_keys=set())

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--cases", type=int, default=50)
    c.add_argument("--tol", type=float)
    c.add_argument("--f64", action="store_true")
    c.add_argument("--inject-fault", action="store_true",
                   help="corrupt one backward to verify the checker catches it")
    c.set_defaults(func=cmd_gradcheck, config_keys=set())
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _merge_config(args, argv, args.config_keys)
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
