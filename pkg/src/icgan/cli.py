"""Command-line entry point.

Subcommands: make-dataset, train, train-classifier, eval-fid, eval-discrete,
eval-continuous, ablate, plot.  Every run writes a config echo and a
manifest of its outputs into the run directory; identical parameters
reproduce identical bytes.  Exit codes: 0 success, 1 usage error, 2
runtime/numerical error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import torch

from . import ablation, colormnist, metrics, models, trainer
from .losses import LossWeights, TrainingDivergence
from .seeding import derive_seed, derive_torch_generator


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _write_echo(out_dir, command, params, outputs):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"command": command, "parameters": params}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"command": command, "outputs": sorted(outputs)}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")


def _env_default(var, fallback=None):
    return os.environ.get(var, fallback)


def build_parser() -> _Parser:
    p = _Parser(prog="icgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-dataset", help="synthesize the dataset splits")
    d.add_argument("--mnist", default=_env_default("ICGAN_MNIST_DIR"),
                   help="directory of source idx files "
                        "(env ICGAN_MNIST_DIR)")
    d.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"), required=False)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--export-png", action="store_true",
                   help="also write png directories with a labels.csv manifest")
    d.add_argument("--png-limit", type=int, default=64,
                   help="records per split to export as png (0 = all)")

    t = sub.add_parser("train", help="adversarial training run")
    t.add_argument("--data", required=True, help="train split file")
    t.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    t.add_argument("--variant", choices=trainer.VARIANTS, default="icgan")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--batch-size", type=int, default=100)
    t.add_argument("--g-lr", type=float, default=5e-2)
    t.add_argument("--d-lr", type=float, default=8e-2)
    t.add_argument("--lr-decay", type=float, default=0.9)
    t.add_argument("--lr-decay-every", type=int, default=5)
    t.add_argument("--n-critic", type=int, default=1)
    t.add_argument("--adam-beta1", type=float, default=0.0)
    t.add_argument("--adam-beta2", type=float, default=0.99)
    t.add_argument("--lambda-gp", type=float, default=10.0)
    t.add_argument("--lambda1", type=float, default=1.0)
    t.add_argument("--lambda2", type=float, default=1.0)
    t.add_argument("--supervised-cat", action="store_true")
    t.add_argument("--base-channels", type=int, default=256)
    t.add_argument("--d-base-channels", type=int, default=32)
    t.add_argument("--eval-every", type=int, default=500)
    t.add_argument("--fid-samples", type=int, default=10_000)
    t.add_argument("--classifier", default=None,
                   help="classifier checkpoint enabling fid logging")
    t.add_argument("--resume", default=None, help="train-state checkpoint")

    c = sub.add_parser("train-classifier", help="train the evaluation classifier")
    c.add_argument("--data-train", required=True)
    c.add_argument("--data-test", required=True)
    c.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epochs", type=int, default=30)
    c.add_argument("--lr", type=float, default=2e-3)
    c.add_argument("--batch-size", type=int, default=100)
    c.add_argument("--base-channels", type=int, default=32)
    c.add_argument("--target-acc", type=float, default=0.994)
    c.add_argument("--train-subset", type=int, default=None)

    f = sub.add_parser("eval-fid", help="feature-space distance to real data")
    f.add_argument("--generator", required=True)
    f.add_argument("--classifier", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    f.add_argument("--samples", type=int, default=10_000)
    f.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval-discrete", help="digit-recovery accuracy")
    e.add_argument("--generator", required=True)
    e.add_argument("--classifier", required=True)
    e.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--rounds", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)

    k = sub.add_parser("eval-continuous", help="color-ring hue score")
    k.add_argument("--generator", required=True)
    k.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    k.add_argument("--steps", type=int, default=900)
    k.add_argument("--digit", type=int, default=0)
    k.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="gradient-score suppression grids")
    a.add_argument("--generator", required=True)
    a.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    a.add_argument("--fraction", type=float, default=0.10)
    a.add_argument("--digits", default="0,1,2,3,4,5,6,7,8,9",
                   help="comma-separated digit rows")
    a.add_argument("--score-samples", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("plot", help="figures from run artifacts")
    g.add_argument("--out", default=_env_default("ICGAN_OUT_DIR"))
    g.add_argument("--runlog", default=None, help="runlog.jsonl for the fid curve")
    g.add_argument("--generator", default=None,
                   help="generator checkpoint for the interpolation grid")
    g.add_argument("--ring-report", default=None,
                   help="eval-continuous report.jsonl for the linearity curve")
    g.add_argument("--steps", type=int, default=40,
                   help="interpolation grid columns")
    g.add_argument("--seed", type=int, default=0)
    return p


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required (or set ICGAN_OUT_DIR)")
    return args.out


def _params(args):
    skip = {"command"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _load_classifier(path):
    clf, manifest = models.load_model(path, "classifier")
    if "test_accuracy" not in manifest:
        raise UsageError(
            f"{path} is not a trained classifier checkpoint "
            "(missing test_accuracy); run train-classifier first")
    return clf, manifest


def _cmd_make_dataset(args):
    if not args.mnist:
        raise UsageError("--mnist is required (or set ICGAN_MNIST_DIR)")
    out = _require_out(args)
    mnist = colormnist.load_mnist_idx(args.mnist)
    train, test = colormnist.build_dataset(mnist, args.seed)
    os.makedirs(out, exist_ok=True)
    outputs = []
    for name, split in (("train.cmnist", train), ("test.cmnist", test)):
        colormnist.save_dataset(split, os.path.join(out, name))
        outputs.append(name)
    if args.export_png:
        limit = None if args.png_limit == 0 else args.png_limit
        for name, split in (("png/train", train), ("png/test", test)):
            colormnist.export_png(split, os.path.join(out, name), limit)
            outputs.append(name)
    _write_echo(out, "make-dataset", _params(args), outputs)
    print(f"wrote {len(train)} train / {len(test)} test records to {out}")
    return 0


def _cmd_train(args):
    out = _require_out(args)
    weights = LossWeights(lambda_gp=args.lambda_gp, lambda1=args.lambda1,
                          lambda2=args.lambda2,
                          supervised_cat=args.supervised_cat)
    config = trainer.TrainConfig(
        batch_size=args.batch_size, g_lr0=args.g_lr, d_lr0=args.d_lr,
        lr_decay=args.lr_decay, lr_decay_every=args.lr_decay_every,
        epochs=args.epochs, n_critic=args.n_critic,
        adam_beta1=args.adam_beta1, adam_beta2=args.adam_beta2,
        seed=args.seed, eval_every=args.eval_every,
        fid_samples=args.fid_samples, variant=args.variant,
        base_channels=args.base_channels,
        d_base_channels=args.d_base_channels, weights=weights,
    )
    dataset = colormnist.load_dataset(args.data)
    classifier = None
    if args.classifier:
        classifier, _ = _load_classifier(args.classifier)
    state, runlog = trainer.train_run(config, dataset, out_dir=out,
                                      classifier=classifier,
                                      resume_from=args.resume)
    models.save_model(os.path.join(out, "generator_final.ckpt"), "generator",
                      state.generator, state.step,
                      extra={"variant": config.variant, "seed": config.seed})
    models.save_model(os.path.join(out, "discriminator_final.ckpt"),
                      "discriminator", state.discriminator, state.step)
    outputs = ["runlog.jsonl", "train_state_final.ckpt", "generator_final.ckpt",
               "discriminator_final.ckpt"]
    outputs += [f"epoch_{e:04d}.ckpt" for e in range(1, state.epoch + 1)]
    _write_echo(out, "train", _params(args), outputs)
    print(f"trained {state.step} steps ({state.epoch} epochs), "
          f"variant={config.variant}")
    return 0


def _cmd_train_classifier(args):
    out = _require_out(args)
    config = trainer.ClassifierConfig(
        batch_size=args.batch_size, lr=args.lr, epochs=args.epochs,
        target_accuracy=args.target_acc, seed=args.seed,
        base_channels=args.base_channels, train_subset=args.train_subset,
    )
    train_ds = colormnist.load_dataset(args.data_train)
    test_ds = colormnist.load_dataset(args.data_test)
    clf, history = trainer.train_classifier(config, train_ds, test_ds)
    os.makedirs(out, exist_ok=True)
    models.save_model(
        os.path.join(out, "classifier.ckpt"), "classifier", clf,
        step=len(history["epochs"]),
        extra={"test_accuracy": history["test_accuracy"],
               "per_class": history["per_class"],
               "reached_target": history["reached_target"]},
    )
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(history, fh, sort_keys=True, indent=2)
    _write_echo(out, "train-classifier", _params(args),
                ["classifier.ckpt", "history.json"])
    print(f"classifier test accuracy {history['test_accuracy']:.4f} "
          f"(target {config.target_accuracy})")
    return 0


def _save_reports(out, reports):
    path = os.path.join(out, "report.jsonl")
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")
    return "report.jsonl"


def _cmd_eval_fid(args):
    out = _require_out(args)
    gen, _ = models.load_model(args.generator, "generator")
    clf, _ = _load_classifier(args.classifier)
    dataset = colormnist.load_dataset(args.data).digit_subset()
    n = min(args.samples, len(dataset))
    sel = np.random.default_rng(derive_seed(args.seed, "fid-real")).choice(
        len(dataset), size=n, replace=False)
    real = trainer._images_to_tensor(dataset.images[sel])
    ref = metrics.classifier_features(clf, real)
    rng = derive_torch_generator(args.seed, "fid-gen")
    feats = []
    with torch.no_grad():
        for i in range(0, n, 500):
            codes = models.sample_latents(min(500, n - i), rng)
            feats.append(metrics.classifier_features(clf, gen(codes)))
    value = metrics.fid(np.concatenate(feats), ref)
    report = metrics.MetricReport("fid", value, 0.0, {"samples": n})
    os.makedirs(out, exist_ok=True)
    outputs = [_save_reports(out, [report])]
    _write_echo(out, "eval-fid", _params(args), outputs)
    print(f"fid {value:.6f} over {n} samples")
    return 0


def _cmd_eval_discrete(args):
    out = _require_out(args)
    gen, _ = models.load_model(args.generator, "generator")
    clf, _ = _load_classifier(args.classifier)
    rng = derive_torch_generator(args.seed, "eval-discrete")
    report = metrics.discrete_accuracy(gen, clf, rng, n=args.n,
                                       rounds=args.rounds)
    os.makedirs(out, exist_ok=True)
    outputs = [_save_reports(out, [report])]
    _write_echo(out, "eval-discrete", _params(args), outputs)
    print(f"discrete accuracy {report.value:.4f} +- {report.stderr:.4f} "
          f"({args.rounds} rounds of {args.n})")
    return 0


def _cmd_eval_continuous(args):
    out = _require_out(args)
    gen, _ = models.load_model(args.generator, "generator")
    rng = derive_torch_generator(args.seed, "eval-continuous")
    ring = metrics.generated_color_ring(gen, rng, digit=args.digit,
                                        steps=args.steps)
    mse = metrics.hue_mse_best_alignment(ring)
    aligned = metrics.align_ring(ring, mse.aux["offset"], mse.aux["flipped"])
    linearity = metrics.linearity_report(aligned)
    os.makedirs(out, exist_ok=True)
    outputs = [_save_reports(out, [mse, linearity])]
    _write_echo(out, "eval-continuous", _params(args), outputs)
    print(f"hue mse {mse.value:.6f} (unit interval), "
          f"{mse.aux['degrees']:.4f} deg scaled; "
          f"linearity R^2 {linearity.value:.4f}")
    if ring.unreliable:
        print(f"warning: {ring.degenerate_fraction:.1%} of ring steps had "
              "degenerate hue; scores unreliable")
    return 0


def _cmd_ablate(args):
    out = _require_out(args)
    gen, _ = models.load_model(args.generator, "generator")
    digits = [int(tok) for tok in args.digits.split(",") if tok != ""]
    if any(d < 0 or d > 9 for d in digits):
        raise UsageError("digits must lie in 0-9")
    rng = derive_torch_generator(args.seed, "ablate")
    cells, baselines, stats = ablation.ablation_grid(
        gen, rng, digits=digits, fraction=args.fraction,
        score_samples=args.score_samples)
    os.makedirs(out, exist_ok=True)
    n_cols = len(models.ABLATABLE_LAYERS)
    outputs = []
    for mode in ("layerwise", "accumulative"):
        name = f"grid_{mode}.png"
        ablation.save_grid_png(os.path.join(out, name), cells[mode],
                               baselines, digits, n_cols)
        outputs.append(name)
    ablation.save_stats_jsonl(os.path.join(out, "stats.jsonl"), stats)
    outputs.append("stats.jsonl")
    _write_echo(out, "ablate", _params(args), outputs)
    print(f"wrote ablation grids for digits {digits} (fraction {args.fraction})")
    return 0


def _cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not (args.runlog or args.generator or args.ring_report):
        raise UsageError("plot needs at least one of --runlog, --generator, "
                         "--ring-report")
    out = _require_out(args)
    os.makedirs(out, exist_ok=True)
    outputs = []
    if args.runlog:
        log = trainer.RunLog.load(args.runlog)
        if not log.evals:
            raise ValueError(f"{args.runlog} holds no fid evaluations")
        xs = [r["step"] for r in log.evals]
        ys = [r["fid"] for r in log.evals]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("generator iterations")
        ax.set_ylabel("feature fid (lower is better)")
        fig.tight_layout()
        fig.savefig(os.path.join(out, "fid_curve.png"), dpi=120)
        plt.close(fig)
        outputs.append("fid_curve.png")
    if args.generator:
        gen, _ = models.load_model(args.generator, "generator")
        rng = derive_torch_generator(args.seed, "plot-interp")
        ring_codes = []
        noise = torch.rand(models.NOISE_DIM, generator=rng)
        hues = np.arange(args.steps) / args.steps
        cat = torch.zeros(args.steps, models.NUM_DIGITS)
        cat[:, 0] = 1.0
        col = torch.from_numpy(colormnist.hsv_to_rgb(hues)).float()
        codes = torch.cat([cat, col, noise.expand(args.steps, -1)], dim=1)
        with torch.no_grad():
            imgs = metrics.chw_to_hwc(gen(codes))
        strip = np.concatenate(list(imgs), axis=1)
        fig, ax = plt.subplots(figsize=(args.steps * 0.3, 1.2))
        ax.imshow(strip)
        ax.axis("off")
        fig.tight_layout()
        fig.savefig(os.path.join(out, "interpolation_grid.png"), dpi=120)
        plt.close(fig)
        outputs.append("interpolation_grid.png")
    if args.ring_report:
        curve = None
        with open(args.ring_report) as fh:
            for line in fh:
                rep = metrics.MetricReport.from_json(line)
                if rep.kind == "hue_linearity":
                    curve = rep
        if curve is None:
            raise ValueError(f"{args.ring_report} holds no hue_linearity record")
        ys = curve.aux["curve"]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(range(len(ys)), ys)
        ax.set_xlabel("interpolation step")
        ax.set_ylabel("unwrapped hue")
        ax.set_title(f"R^2 = {curve.value:.4f}")
        fig.tight_layout()
        fig.savefig(os.path.join(out, "hue_linearity.png"), dpi=120)
        plt.close(fig)
        outputs.append("hue_linearity.png")
    _write_echo(out, "plot", _params(args), outputs)
    print(f"wrote {', '.join(outputs)}")
    return 0


_COMMANDS = {
    "make-dataset": _cmd_make_dataset,
    "train": _cmd_train,
    "train-classifier": _cmd_train_classifier,
    "eval-fid": _cmd_eval_fid,
    "eval-discrete": _cmd_eval_discrete,
    "eval-continuous": _cmd_eval_continuous,
    "ablate": _cmd_ablate,
    "plot": _cmd_plot,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (ValueError, OSError, ArithmeticError, TrainingDivergence,
            RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
