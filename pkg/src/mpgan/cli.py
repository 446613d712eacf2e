"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
import argparse
import json
import logging
import os
import sys

from mpgan import pipeline
from mpgan.data import DATASET_FILES, SyntheticSpec, generate_synthetic_dataset, load_manifest, save_dataset, save_semantic
from mpgan.errors import ConfigError, DataError, MpganError
from mpgan.text import load_corpus, pca_fit, pca_transform, tfidf

log = logging.getLogger("mpgan")


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _add_run_options(p):
    p.add_argument("--config", help="run configuration JSON; flags override it")
    p.add_argument("--data-dir", help="directory holding features.mpfb, semantics.mpse, manifest.json")
    p.add_argument("--features")
    p.add_argument("--semantics")
    p.add_argument("--manifest")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel patch workers (default: $MPGAN_JOBS or 1)")
    p.add_argument("--variant", choices=pipeline.VARIANTS)
    p.add_argument("--attention-mode", choices=("raw", "uniform"))
    p.add_argument("--attention-nearest", choices=("centroid", "sample"))
    p.add_argument("--n-synth", type=int, dest="n_synth_per_class")
    p.add_argument("--pca-k", type=int)
    p.add_argument("--fractions", type=_float_list)
    g = p.add_argument_group("GAN")
    g.add_argument("--iterations", type=int)
    g.add_argument("--denoiser", choices=("pca", "fc"))
    g.add_argument("--denoiser-dim", type=int)
    g.add_argument("--z-dim", type=int)
    g.add_argument("--n-critic", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lambda-pivot", type=float)
    g.add_argument("--beta-gp", type=float)
    g.add_argument("--gan-lr", type=float)
    c = p.add_argument_group("classifier")
    c.add_argument("--epochs", type=int)
    c.add_argument("--classifier-lr", type=float)


def _run_config(args):
    jobs = args.jobs
    if jobs is None and os.environ.get("MPGAN_JOBS"):
        try:
            jobs = int(os.environ["MPGAN_JOBS"])
        except ValueError:
            raise ConfigError("MPGAN_JOBS must be an integer") from None
    overrides = {
        "data_dir": args.data_dir,
        "features": args.features,
        "semantics": args.semantics,
        "manifest": args.manifest,
        "out_dir": args.out_dir,
        "seed": args.seed,
        "jobs": jobs,
        "variant": args.variant,
        "attention_mode": args.attention_mode,
        "attention_nearest": args.attention_nearest,
        "n_synth_per_class": args.n_synth_per_class,
        "pca_k": args.pca_k,
        "fractions": args.fractions,
        "gan.iterations": args.iterations,
        "gan.denoiser": args.denoiser,
        "gan.denoiser_dim": args.denoiser_dim,
        "gan.z_dim": args.z_dim,
        "gan.n_critic": args.n_critic,
        "gan.batch_size": args.batch_size,
        "gan.lambda_pivot": args.lambda_pivot,
        "gan.beta_gp": args.beta_gp,
        "gan.lr": args.gan_lr,
        "classifier.epochs": args.epochs,
        "classifier.lr": args.classifier_lr,
    }
    if args.data_dir:
        # explicit paths still win over the data dir
        for key, name in DATASET_FILES.items():
            if overrides[key] is None:
                overrides[key] = os.path.join(args.data_dir, name)
    overrides.pop("data_dir")
    return pipeline.load_run_config(args.config, overrides)


def cmd_synth_data(args):
    seps = args.separations or [8.0] * args.patches
    spec = SyntheticSpec(
        n_seen=args.seen, n_unseen=args.unseen, n_patches=args.patches, feat_dim=args.feat_dim,
        semantic_dim=args.semantic_dim, samples_per_class=args.samples, patch_separations=seps,
        noise_sigma=args.sigma, seed=args.seed,
    )
    bank, embedding, split = generate_synthetic_dataset(spec)
    save_dataset(args.out_dir, bank, embedding, split)
    print(f"wrote {bank.n_samples} samples x {bank.n_patches} patches x {bank.feat_dim} dims to {args.out_dir}")


def cmd_ingest(args):
    corpus = load_corpus(args.corpus)
    fit = None
    if args.fit_seen_only:
        if not args.manifest:
            raise ConfigError("--fit-seen-only needs --manifest")
        fit = load_manifest(args.manifest).split.seen
    emb = tfidf(corpus, fit_classes=fit)
    save_semantic(emb, args.out)
    print(f"wrote TF-IDF bank: {len(emb.class_ids)} classes x {emb.dim} terms to {args.out}")
    if args.pca_k:
        model = pca_fit(emb, args.pca_k)
        den = pca_transform(model, emb)
        save_semantic(den, args.pca_out or args.out + ".pca")
        print(f"wrote PCA-denoised bank with {model.k} components")


def cmd_train(args):
    cfg = _run_config(args)
    outputs = pipeline.run_train(cfg)
    print(f"trained {cfg.variant} run in {cfg.out_dir} ({len(outputs)} files)")


def cmd_synthesize(args):
    cfg = _run_config(args)
    bank = pipeline.run_synthesize(cfg)
    print(f"synthesized {bank.n_samples} samples into {cfg.out_dir}")


def cmd_attention(args):
    cfg = _run_config(args)
    weights = pipeline.run_attention(cfg)
    print(json.dumps({"patch_names": list(weights.patch_names), "weights": weights.weights.tolist()}))


def cmd_evaluate(args):
    cfg = _run_config(args)
    report = pipeline.run_evaluate(cfg)
    print(json.dumps(report.to_json()["map"] | {"top1": report.top1}))


def cmd_retrieve(args):
    cfg = _run_config(args)
    report = pipeline.run_retrieve(cfg)
    print(json.dumps(report["map"]))


def build_parser():
    parser = argparse.ArgumentParser(prog="mpgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seen", type=int, default=10)
    p.add_argument("--unseen", type=int, default=4)
    p.add_argument("--patches", type=int, default=3)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--semantic-dim", type=int, default=5)
    p.add_argument("--samples", type=int, default=50, help="samples per class")
    p.add_argument("--separations", type=_float_list, help="comma separated, one per patch")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ingest", help="corpus JSON to TF-IDF semantic bank")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--fit-seen-only", action="store_true",
                   help="fit vocabulary and idf on seen-class documents only")
    p.add_argument("--pca-k", type=int)
    p.add_argument("--pca-out")
    p.set_defaults(func=cmd_ingest)

    for name, func, text in [
        ("train", cmd_train, "train GANs, attention and classifiers"),
        ("synthesize", cmd_synthesize, "regenerate unseen features from GAN checkpoints"),
        ("attention", cmd_attention, "compute attention weights"),
        ("evaluate", cmd_evaluate, "Top-1 and retrieval report"),
        ("retrieve", cmd_retrieve, "zero-shot retrieval report"),
    ]:
        p = sub.add_parser(name, help=text)
        _add_run_options(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MpganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
