"""Command-line front end.

Subcommands cover the full workflow: generate a synthetic task, train the
weight-inference model, inject inferred rows into a head, evaluate, run the
ablation ladder, sweep the seen-class fraction, run adapted baselines, and
produce the similarity-rank failure analysis.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""

import argparse
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import baselines as bl
from .data import (
    SplitManifest,
    load_classifier_head,
    load_descriptor_set,
    load_feature_set,
    load_manifest,
    make_pairs,
    save_ids,
    save_manifest,
    save_matrix,
    subsample_pairs,
    synth_generate,
)
from .errors import DivergenceError, IcisError, ZeroNormError
from .evaluation import (
    EvalReport,
    evaluate,
    failure_histogram,
    harmonic_mean,
    micro_accuracy,
    per_class_mean_accuracy,
)
from .model import (
    DEFAULT_HIDDEN,
    IcisModel,
    LossConfig,
    TrainConfig,
    ablation_variants,
    infer_and_inject,
    infer_weights,
    inject,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tensor import RngState

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

TERM_FLAGS = {"a2w": "use_a_to_w", "a2a": "use_a_to_a", "w2w": "use_w_to_w", "w2a": "use_w_to_a"}


def _write_config(path: Path, settings: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in settings.items()), encoding="utf-8")


def _write_report(run_dir: Path, report: EvalReport) -> None:
    (run_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (run_dir / "report.structured").write_text(report.to_json() + "\n", encoding="utf-8")


def _loss_config_from_args(args) -> LossConfig:
    names = [t.strip() for t in args.terms.split(",") if t.strip()]
    unknown = [t for t in names if t not in TERM_FLAGS]
    if unknown:
        raise IcisError(f"unknown loss terms {unknown}; choose from {sorted(TERM_FLAGS)}")
    flags = {flag: key in names for key, flag in TERM_FLAGS.items()}
    return LossConfig(
        distance=args.distance,
        include_unseen_descriptors=args.include_unseen_desc,
        **flags,
    )


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch,
        hidden_dim=args.hidden_dim,
        max_epochs=args.max_epochs,
        stop_window=args.stop_window,
        stop_threshold=args.stop_threshold,
        seed=args.seed,
    )


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden-dim", type=int, default=DEFAULT_HIDDEN)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--stop-window", type=int, default=10)
    p.add_argument("--stop-threshold", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-bias", action="store_true",
                   help="regress head biases as a trailing weight coordinate")


def _add_loss_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--distance", choices=["cosine", "l2"], default="cosine")
    p.add_argument("--terms", default="a2w,a2a,w2w,w2a",
                   help="comma list of loss terms; a2w is mandatory")
    p.add_argument("--include-unseen-desc", action=argparse.BooleanOptionalAction, default=True,
                   help="mix unseen descriptors into the descriptor autoencoder")


def _load_task(args):
    manifest = load_manifest(args.manifest)
    descriptors = load_descriptor_set(args.descriptors)
    head = load_classifier_head(args.head, seen_ids=manifest.seen,
                                biases_path=getattr(args, "biases", None))
    return manifest, descriptors, head


def _train_once(descriptors, head, manifest, loss_config, train_config, include_bias, run_dir: Path):
    """One training run in its own directory: config, trace, checkpoint."""
    run_dir.mkdir(parents=True, exist_ok=True)
    pairs = make_pairs(descriptors, head.subset(manifest.seen), include_bias=include_bias)
    unseen_a = None
    if manifest.unseen and loss_config.include_unseen_descriptors:
        unseen_a = descriptors.subset(manifest.unseen).matrix
    model = IcisModel.init(pairs.descriptors.shape[1], pairs.weights.shape[1],
                           train_config.hidden_dim,
                           RngState(train_config.seed).spawn("model-init"))
    settings = dict(sorted(asdict(train_config).items()))
    settings.update(sorted(asdict(loss_config).items()))
    settings["include_bias"] = include_bias
    config_path = run_dir / "config.txt"
    _write_config(config_path, settings)
    started = time.monotonic()
    try:
        trace = train(model, pairs, unseen_a, loss_config, train_config)
    except DivergenceError as exc:
        if exc.trace is not None:
            exc.trace.to_csv(run_dir / "trace.csv")
        raise
    settings["wall_clock_s"] = f"{time.monotonic() - started:.3f}"
    _write_config(config_path, settings)
    trace.to_csv(run_dir / "trace.csv")
    save_checkpoint(run_dir / "model.ckpt", model, loss_config,
                    include_bias=include_bias, seed=train_config.seed)
    return model, trace


def _evaluate_task(head_with_new, features, manifest) -> EvalReport:
    unseen_feats = features.restrict_to(manifest.unseen)
    seen_feats = features.restrict_to(manifest.seen)
    return evaluate(
        head_with_new,
        unseen_feats,
        seen_feats if seen_feats.n_samples else None,
        unseen_ids=manifest.unseen,
    )


def _fmt(value, spec: str = "%.2f") -> str:
    return "n/a" if value is None else (spec % value)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = synth_generate(
        seed=args.seed,
        n_seen=args.seen,
        n_unseen=args.unseen,
        d_a=args.desc_dim,
        d_w=args.weight_dim,
        map_kind=args.map,
        noise_std=args.map_noise,
        samples_per_class=args.samples_per_class,
        feature_noise=args.feature_noise,
        margin=args.margin,
        descriptor_rank=args.descriptor_rank,
    )
    task.descriptors.save(out / "descriptors.wsmat")
    task.head.save(out / "head.wsmat")
    task.features.save(out / "features.wsmat")
    save_manifest(out / "manifest.txt", task.manifest)
    if task.manifest.unseen:
        save_matrix(out / "true_unseen.wsmat", task.true_unseen_weights)
        save_ids(out / "true_unseen.ids", task.manifest.unseen)
    print(f"wrote synthetic task to {out}: {args.seen} seen, {args.unseen} unseen classes")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest, descriptors, head = _load_task(args)
    run_dir = Path(args.out)
    _, trace = _train_once(descriptors, head, manifest,
                           _loss_config_from_args(args), _train_config_from_args(args),
                           args.include_bias, run_dir)
    tail = trace.total[-1] if trace.total else float("nan")
    print(f"trained {trace.epochs_run} epochs (stopped_early={trace.stopped_early}), "
          f"final loss {tail:.6f}; checkpoint at {run_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_inject(args) -> int:
    manifest = load_manifest(args.manifest)
    descriptors = load_descriptor_set(args.descriptors)
    head = load_classifier_head(args.head, seen_ids=manifest.seen, biases_path=args.biases)
    model, _loss_config, meta = load_checkpoint(args.checkpoint)
    include_bias = bool(int(meta.get("include_bias", "0")))
    if not manifest.unseen:
        raise IcisError("manifest lists no unseen classes to inject")
    unseen = descriptors.subset(manifest.unseen)
    new_head = infer_and_inject(model, head, unseen.matrix, unseen.class_ids,
                                include_bias=include_bias, zsl_only=args.zsl_only)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bias_path = out.with_name(out.stem + ".biases" + out.suffix) if new_head.biases is not None else None
    new_head.save(out, bias_path)
    print(f"wrote head with {new_head.n_classes} classes to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    head = load_classifier_head(args.head, seen_ids=manifest.seen, biases_path=args.biases)
    features = load_feature_set(args.features)
    if args.zsl_only:
        present = [c for c in manifest.unseen if c in set(head.class_ids)]
        head = head.subset(present)
        report = evaluate(head, features.restrict_to(present), None, unseen_ids=present)
    else:
        report = _evaluate_task(head, features, manifest)
    sys.stdout.write(report.to_text())
    if args.report_dir:
        run_dir = Path(args.report_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_report(run_dir, report)
    return EXIT_OK


def _run_variant(name, loss_config, descriptors, train_head, train_manifest,
                 inject_head, eval_manifest, features, train_config, include_bias, run_dir):
    """Train on one (possibly subsampled) pair set, inject into the full
    head, evaluate, and persist the run artifacts."""
    model, trace = _train_once(descriptors, train_head, train_manifest, loss_config,
                               train_config, include_bias, run_dir)
    unseen = descriptors.subset(eval_manifest.unseen)
    new_head = infer_and_inject(model, inject_head, unseen.matrix, unseen.class_ids,
                                include_bias=include_bias)
    report = _evaluate_task(new_head, features, eval_manifest)
    _write_report(run_dir, report)
    print(f"{name}: zsl={report.zsl_accuracy:.2f} unseen={report.gzsl_unseen:.2f} "
          f"seen={_fmt(report.gzsl_seen)} H={_fmt(report.harmonic)} "
          f"entropy={report.entropy_unseen:.3f} epochs={trace.epochs_run}")
    return report, trace


def cmd_ablate(args) -> int:
    manifest, descriptors, head = _load_task(args)
    features = load_feature_set(args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_config = _train_config_from_args(args)
    lines = ["variant,zsl,gzsl_unseen,gzsl_seen,harmonic,entropy_unseen,epochs"]
    for name, loss_config in ablation_variants().items():
        report, trace = _run_variant(name, loss_config, descriptors, head, manifest,
                                     head, manifest, features, train_config,
                                     args.include_bias, out / name)
        lines.append(
            f"{name},{report.zsl_accuracy:.4f},{report.gzsl_unseen:.4f},"
            f"{_fmt(report.gzsl_seen, '%.4f')},{_fmt(report.harmonic, '%.4f')},"
            f"{report.entropy_unseen:.6f},{trace.epochs_run}"
        )
    (out / "summary.csv").write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args) -> int:
    manifest, descriptors, head = _load_task(args)
    features = load_feature_set(args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    except ValueError as exc:
        raise IcisError(f"bad --fractions value: {exc}") from None
    if not fractions:
        raise IcisError("no fractions given")
    train_config = _train_config_from_args(args)
    all_seen = make_pairs(descriptors, head.subset(manifest.seen))
    lines = ["variant,fraction,n_seen_pairs,zsl,gzsl_unseen,gzsl_seen,harmonic"]
    for name, loss_config in ablation_variants().items():
        for fraction in fractions:
            sub = subsample_pairs(all_seen, fraction, args.seed)
            # train on the subsampled pairs; injection still extends the full head
            sub_manifest = SplitManifest(sub.class_ids, manifest.unseen)
            run_dir = out / name / f"fraction_{fraction:g}"
            report, _trace = _run_variant(
                f"{name} @ {fraction:g}", loss_config, descriptors,
                head.subset(sub.class_ids), sub_manifest, head, manifest,
                features, train_config, args.include_bias, run_dir,
            )
            lines.append(
                f"{name},{fraction:g},{len(sub)},{report.zsl_accuracy:.4f},"
                f"{report.gzsl_unseen:.4f},{_fmt(report.gzsl_seen, '%.4f')},"
                f"{_fmt(report.harmonic, '%.4f')}"
            )
    (out / "summary.csv").write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")
    return EXIT_OK


def cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest)
    descriptors = load_descriptor_set(args.descriptors)
    head = load_classifier_head(args.head, seen_ids=manifest.seen, biases_path=args.biases)
    features = load_feature_set(args.features)
    record = failure_histogram(head, features, descriptors, args.class_id, bin_size=args.bin_size)
    sys.stdout.write(record.to_text())
    if args.out:
        Path(args.out).write_text(record.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def _conse_report(manifest, descriptors, seen_head, seen_desc, unseen_desc, features, top_t) -> EvalReport:
    unseen_feats = features.restrict_to(manifest.unseen)
    report = EvalReport(n_unseen_samples=unseen_feats.n_samples)
    zsl_pred = bl.conse_classify(seen_head, seen_desc, unseen_desc, unseen_feats.features, top_t)
    report.zsl_accuracy, per_class = per_class_mean_accuracy(unseen_feats.labels, zsl_pred, manifest.unseen)
    report.zsl_micro = micro_accuracy(unseen_feats.labels, zsl_pred)
    report.per_class["zsl"] = per_class
    all_pred = bl.conse_classify(seen_head, seen_desc, descriptors, unseen_feats.features, top_t)
    report.gzsl_unseen, _ = per_class_mean_accuracy(unseen_feats.labels, all_pred, manifest.unseen)
    seen_feats = features.restrict_to(manifest.seen)
    if seen_feats.n_samples:
        seen_pred = bl.conse_classify(seen_head, seen_desc, descriptors, seen_feats.features, top_t)
        report.gzsl_seen, _ = per_class_mean_accuracy(seen_feats.labels, seen_pred, manifest.seen)
        report.harmonic = harmonic_mean(report.gzsl_unseen, report.gzsl_seen)
        report.n_seen_samples = seen_feats.n_samples
    return report


def cmd_baseline(args) -> int:
    manifest, descriptors, head = _load_task(args)
    features = load_feature_set(args.features)
    seen_head = head.subset(manifest.seen)
    seen_desc = descriptors.subset(manifest.seen)
    unseen_desc = descriptors.subset(manifest.unseen)
    method = args.method

    if method == "conse":
        report = _conse_report(manifest, descriptors, seen_head, seen_desc, unseen_desc,
                               features, args.top_t)
    else:
        if method == "costa":
            rows = bl.costa_weights(unseen_desc, seen_desc, seen_head)
        elif method == "wavg":
            rows = bl.vgse_wavg_weights(unseen_desc, seen_desc, seen_head, temperature=args.temperature)
        elif method == "smo":
            rows = bl.vgse_smo_weights(unseen_desc, seen_desc, seen_head, gamma=args.gamma)
        elif method == "dae":
            if args.base == "costa":
                rows = bl.costa_weights(unseen_desc, seen_desc, seen_head)
            elif args.base == "smo":
                rows = bl.vgse_smo_weights(unseen_desc, seen_desc, seen_head, gamma=args.gamma)
            else:
                rows = bl.vgse_wavg_weights(unseen_desc, seen_desc, seen_head, temperature=args.temperature)
            rows = bl.dae_refine(seen_head.weights, rows, seed=args.seed)
        elif method == "subreg":
            pairs = make_pairs(descriptors, seen_head)
            model = IcisModel.init(pairs.descriptors.shape[1], pairs.weights.shape[1],
                                   args.hidden_dim, RngState(args.seed).spawn("model-init"))
            cfg = _train_config_from_args(args)
            trace = bl.train_subreg(model, pairs, unseen_desc.matrix, lam=args.lam,
                                    distance=args.distance, train_config=cfg)
            if args.out:
                run_dir = Path(args.out)
                run_dir.mkdir(parents=True, exist_ok=True)
                trace.to_csv(run_dir / "trace.csv")
            rows = infer_weights(model, unseen_desc.matrix)
        else:
            raise IcisError(f"unknown baseline method {method!r}")
        new_head = inject(head, manifest.unseen, rows)
        report = _evaluate_task(new_head, features, manifest)

    sys.stdout.write(report.to_text())
    if args.out:
        run_dir = Path(args.out)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_report(run_dir, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icis",
        description="Inject inferred classifier weights for unseen classes into a linear head.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic task with known ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seen", type=int, required=True)
    p.add_argument("--unseen", type=int, required=True)
    p.add_argument("--desc-dim", type=int, required=True)
    p.add_argument("--weight-dim", type=int, required=True)
    p.add_argument("--map", choices=["linear", "mlp"], default="linear")
    p.add_argument("--map-noise", type=float, default=0.0)
    p.add_argument("--samples-per-class", type=int, default=50)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--descriptor-rank", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit the weight-inference model on seen pairs")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--out", required=True, help="run directory")
    _add_loss_options(p)
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inject", help="infer unseen rows from a checkpoint and extend a head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--out", required=True, help="output head path")
    p.add_argument("--zsl-only", action="store_true", help="emit only the injected rows")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("eval", help="score a head on labelled features")
    p.add_argument("--head", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--report-dir", default=None)
    p.add_argument("--zsl-only", action="store_true",
                   help="restrict the decision to the manifest's unseen classes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the cumulative ablation ladder")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="vary the seen-pair fraction for every ablation variant")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.25,0.5,0.75,1.0")
    _add_run_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="similarity-rank histogram of one class's predictions")
    p.add_argument("--head", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--class", dest="class_id", required=True)
    p.add_argument("--bin-size", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("baseline", help="run an adapted baseline end to end")
    p.add_argument("--method", required=True,
                   choices=["conse", "costa", "subreg", "dae", "wavg", "smo"])
    p.add_argument("--descriptors", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--biases", default=None)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--top-t", type=int, default=10)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=1e-3)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--base", choices=["wavg", "costa", "smo"], default="wavg")
    p.add_argument("--distance", choices=["cosine", "l2"], default="l2")
    _add_run_options(p)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, ZeroNormError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except IcisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
