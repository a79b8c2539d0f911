"""Command-line entry point: ``cdrmt <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 validation, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from .config import RunConfig
from .decoupler import Lexicon, decouple
from .errors import CdrmtError, ValidationError

log = logging.getLogger("cdrmt")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

# suites grouped by the module that owns them, for `gradcheck --module`
GRADCHECK_MODULES = {
    "bif": ["bif_forward"],
    "encoders": ["fuse_decoupled_features"],
    "psdql": ["aam_forward", "qsi_forward", "decoder_forward", "predict_heads"],
    "scc": ["proxy_features", "reconstruct_text", "loss_dist", "loss_angle", "loss_struct"],
    "objective": ["focal_loss", "box_losses", "referring_loss"],
}

ABLATIONS = {
    "full": {},
    "no-scc": {"loss": {"struct": 0.0}},
    "no-psdql": {"model": {"use_psdql": False}},
    "motion-first": {"model": {"injection_order": "motion-first"}},
    "inject-det-only": {"model": {"inject_track": False}},
    "inject-track-only": {"model": {"inject_detect": False}},
    "distance-only": {"loss": {"lambda_angle": 0.0}},
}
DEFAULT_ABLATIONS = ("full", "no-scc", "no-psdql")


def _seed_fallback(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("CDRMT_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"CDRMT_SEED must be an integer, got {env!r}") from None


def _load_config(path: str | None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    seed = _seed_fallback(seed)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def _echo_config(cfg: RunConfig, out: str | Path) -> Path:
    path = Path(str(out) + ".config.json")
    cfg.save(path)
    return path


def _merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) else v
    return out


# --- subcommands ----------------------------------------------------------


def cmd_decouple(args) -> int:
    lex = Lexicon.load(args.lexicon) if args.lexicon else None
    parsed = decouple(args.expr, lex)
    print(json.dumps({"static": parsed.static_text, "motion": parsed.motion_text}))
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    from .harness.oracle import referring_oracle
    from .harness.scenes import gen_scenes, write_referred, write_scenes

    cfg = _load_config(args.config)
    seed = _seed_fallback(args.seed)
    seed = cfg.seed if seed is None else seed
    frames = gen_scenes(cfg.data.scene, seed)
    write_scenes(frames, args.out)
    if args.expr:
        if not args.gt_out:
            raise ValidationError("--expr needs --gt-out for the referred-ids file")
        write_referred(((f.t, referring_oracle(args.expr, f)) for f in frames), args.gt_out)
    cfg.seed = seed
    _echo_config(cfg, args.out)
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, TOLERANCE, run_suites

    names = None
    if args.module:
        if args.module in GRADCHECK_MODULES:
            names = GRADCHECK_MODULES[args.module]
        elif args.module in SUITES:
            names = [args.module]
        else:
            choices = sorted(GRADCHECK_MODULES) + sorted(SUITES)
            raise ValidationError(f"unknown module {args.module!r}; choose from {', '.join(choices)}")
    results = run_suites(names)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max rel err {r.error:.3e}  {r.seconds:6.2f}s  {'ok' if r.passed else 'FAIL'}")
    total = sum(r.seconds for r in results)
    print(f"{len(results)} suites, tolerance {TOLERANCE:g}, {total:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_train(args) -> int:
    from .harness.benchmark import evaluate_model
    from .harness.train import train_loop

    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    _echo_config(cfg, out)

    def progress(epoch, result):
        rows = [r for r in result.rows if r["epoch"] == epoch]
        mean = sum(r["total"] for r in rows) / max(1, len(rows))
        print(f"epoch {epoch + 1}/{cfg.train.epochs}  mean loss {mean:.4f}", flush=True)

    res = train_loop(cfg, log_path=log_path, ckpt_path=out, progress=progress)
    print(f"trained {len(res.rows)} steps in {res.seconds:.1f}s; checkpoint {out}, loss log {log_path}")
    if args.evaluate:
        from .harness.benchmark import build_benchmark
        from .metrics import format_table, report_rows

        bench = build_benchmark(cfg.data.num_scenes, cfg.data.scene, cfg.data.expressions, cfg.seed)
        result = evaluate_model(res.model, bench, cfg.thresholds, jobs=args.jobs)
        print(format_table(report_rows(result.per_expression + [("all", result.report, result.f1)])))
    return EXIT_OK


def cmd_track(args) -> int:
    from .harness.scenes import read_scenes
    from .harness.tracking import run_tracking, tracks_to_frames, write_predictions
    from .harness.train import load_model

    model, cfg = load_model(args.ckpt)
    frames = read_scenes(args.scenes)
    tracks = run_tracking(model, frames, args.expr, cfg.thresholds, noise_seed=args.noise_seed)
    rows = tracks_to_frames(tracks, [f.t for f in frames])
    write_predictions(rows, args.out)
    _echo_config(cfg, args.out)
    print(f"{len(tracks)} tracks over {len(frames)} frames written to {args.out}")
    return EXIT_OK


def _eval_pair(args):
    pred_path, gt_path, frames = args
    from .harness.scenes import read_referred
    from .harness.tracking import read_predictions
    from .metrics import EvalSequence, referring_counts, sequence_counts

    referred = read_referred(gt_path)
    gt = {f.t: {o.id: o.box for o in f.objects if o.id in referred.get(f.t, set())} for f in frames}
    pred = {row["t"]: {e["id"]: e["box"] for e in row["tracks"]} for row in read_predictions(pred_path)}
    seq = EvalSequence(gt, pred, Path(pred_path).stem)
    return sequence_counts(seq), referring_counts(seq)


def cmd_eval(args) -> int:
    from concurrent.futures import ProcessPoolExecutor

    from .harness.scenes import read_scenes
    from .metrics import ALPHAS, F1Counts, format_table, merge_counts, report_from_counts, report_rows, rows_to_csv

    if len(args.pred) != len(args.gt):
        raise ValidationError(f"{len(args.pred)} --pred files but {len(args.gt)} --gt files")
    frames = read_scenes(args.scenes)
    work = [(p, g, frames) for p, g in zip(args.pred, args.gt)]
    if args.jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_pair, work))  # map keeps input order
    else:
        results = [_eval_pair(w) for w in work]
    named = [(Path(p).stem, report_from_counts(c), f.f1) for p, (c, f) in zip(args.pred, results)]
    if len(results) > 1:
        pooled = merge_counts((c for c, _ in results), len(ALPHAS))
        f1 = sum((f for _, f in results), F1Counts())
        named.append(("all", report_from_counts(pooled), f1.f1))
    rows = report_rows(named)
    Path(args.out).write_text(rows_to_csv(rows), encoding="utf-8")
    print(format_table(rows))
    return EXIT_OK


def _read_embedding_sets(path: str):
    """Group JSONL rows into sets: by an ``expr`` key when present, else a repeated label starts a new set."""
    from .scc import EmbeddingSet
    from .tensor import Tensor2D

    groups: dict = {}
    order = []
    current = 0
    seen: set = set()
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            label, space, vec = row["label"], row.get("space", "original"), [float(x) for x in row["vector"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}:{n}: malformed embedding row ({exc})") from exc
        if "expr" in row:
            key = row["expr"]
        else:
            if label in seen:
                current += 1
                seen = set()
            seen.add(label)
            key = current
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append((label, Tensor2D([vec]), space))
    sets = []
    for key in order:
        members = groups[key]
        spaces = {m[2] for m in members}
        if len(spaces) != 1:
            raise ValidationError(f"{path}: set {key!r} mixes spaces {sorted(spaces)}")
        sets.append(EmbeddingSet(tuple((lab, v) for lab, v, _ in members), spaces.pop()))
    if not sets:
        raise ValidationError(f"{path}: no embeddings")
    return sets


def cmd_losses(args) -> int:
    from .scc import loss_angle, loss_dist, loss_pointwise, loss_struct

    orig, recon = _read_embedding_sets(args.orig), _read_embedding_sets(args.recon)
    out = {
        "dist": loss_dist(orig, recon).item(),
        "angle": loss_angle(orig, recon).item(),
        "struct": loss_struct(orig, recon, args.lambda_angle).item(),
    }
    try:
        out["pointwise"] = loss_pointwise(orig, recon).item()
    except ValidationError:
        out["pointwise"] = None  # widths differ; only the structural losses are defined
    out["lambda_angle"] = args.lambda_angle
    print(json.dumps(out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness.benchmark import build_benchmark, evaluate_model
    from .harness.train import train_loop
    from .metrics import format_table

    base = _load_config(args.config, args.seed)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValidationError(f"unknown ablation(s) {unknown}; choose from {', '.join(ABLATIONS)}")
    seeds = [base.seed + k for k in range(args.seeds)]
    rows, raw = [], []
    for name in variants:
        scores = {"HOTA": [], "DetA": [], "AssA": [], "RefF1": []}
        for seed in seeds:
            cfg = RunConfig.from_dict(_merge(base.to_dict(), ABLATIONS[name]))
            cfg.seed = seed
            res = train_loop(cfg)
            bench = build_benchmark(cfg.data.num_scenes, cfg.data.scene, cfg.data.expressions, seed)
            result = evaluate_model(res.model, bench, cfg.thresholds, jobs=args.jobs)
            for key in ("HOTA", "DetA", "AssA"):
                scores[key].append(getattr(result.report, key))
            scores["RefF1"].append(result.f1)
            raw.append({"variant": name, "seed": seed, "scc_built": res.scc_built,
                        **{k: v[-1] for k, v in scores.items()}})
            print(f"{name} seed {seed}: HOTA {scores['HOTA'][-1]:.4f} RefF1 {result.f1:.4f}", flush=True)
        rows.append({"name": name, **{k: statistics.median(v) for k, v in scores.items()}})
    print(f"median over seeds {seeds}")
    print(format_table(rows, ("name", "HOTA", "DetA", "AssA", "RefF1")))
    if args.out:
        Path(args.out).write_text(json.dumps({"medians": rows, "runs": raw}, indent=2) + "\n", encoding="utf-8")
        _echo_config(base, args.out)
    return EXIT_OK


# --- wiring ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdrmt", description="Referring multi-object tracking toolkit.")
    p.add_argument("--print-default-config", action="store_true", help="print the default JSON config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("decouple", help="split an expression into static and motion streams")
    s.add_argument("--expr", required=True)
    s.add_argument("--lexicon")
    s.set_defaults(fn=cmd_decouple)

    s = sub.add_parser("gen-scenes", help="generate one synthetic scene as JSONL")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--expr", help="also write the referred ids for this expression")
    s.add_argument("--gt-out")
    s.set_defaults(fn=cmd_gen_scenes)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--module")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("train", help="train on the configured benchmark")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    s.add_argument("--seed", type=int)
    s.add_argument("--evaluate", action="store_true", help="score the trained model on the benchmark")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("track", help="run the tracker over a scene file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--expr", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise-seed", type=int, default=0)
    s.set_defaults(fn=cmd_track)

    s = sub.add_parser("eval", help="HOTA and referring F1 of prediction files")
    s.add_argument("--pred", action="append", required=True)
    s.add_argument("--gt", action="append", required=True, help="referred-ids JSONL, one per --pred")
    s.add_argument("--scenes", required=True, help="scene JSONL holding the ground-truth boxes")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("losses", help="structural losses between two embedding-set files")
    s.add_argument("--orig", required=True)
    s.add_argument("--recon", required=True)
    s.add_argument("--lambda-angle", type=float, default=0.4)
    s.set_defaults(fn=cmd_losses)

    s = sub.add_parser("ablate", help="train and score ablation variants over several seeds")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--variants", default=",".join(DEFAULT_ABLATIONS),
                   help=f"comma list from: {', '.join(ABLATIONS)}")
    s.add_argument("--out", help="JSON with per-run scores and medians")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.print_default_config:
        print(RunConfig().to_json())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except CdrmtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
