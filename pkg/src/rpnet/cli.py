"""Command-line entry point: ``rpnet train | eval | generate | plot``.

Exit status is 0 on success, 2 for user or configuration errors and 3 for
numerical failures during training.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import checkpoint as ckpt
from .config import ExperimentConfig, from_dict, load_config, OUTPUT_ROOT_ENV
from .data import (ClassSplit, IMAGE_EXTENSIONS, load_image_folder, load_omniglot,
                   make_split)
from .evaluation import EvalConfig, model_scorer, pixel_distance_scorer, run_protocol
from .exceptions import (ConfigError, EvaluationError, IngestionError, IntegrityError,
                         NumericalError, SamplingError)
from .models import (CorruptionConfig, Generator, SrpnConfig, build_model, build_siam1,
                     build_siam2, build_srpn, build_wrn_siamese, corrupt)
from .training import (deterministic, read_metrics, resume_adversarial, resume_training,
                       train_adversarial, train_similarity)

log = logging.getLogger("rpnet")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
GR_DEEP_CAVEAT = ("note: generative regularization did not yield any benefits for very "
                  "deep discriminators such as WRN-40 in the reference experiments; "
                  "proceeding anyway")


class UserError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_dataset(ds: dict):
    size = tuple(ds.get("size") or ((28, 28) if ds["kind"] == "omniglot" else (84, 84)))
    if ds["kind"] == "omniglot":
        return load_omniglot(ds["root"], size=size)
    return load_image_folder(ds["root"], size=size)


def split_for(dataset, ds: dict) -> ClassSplit:
    if ds.get("split_manifest"):
        return ClassSplit.load(ds["split_manifest"])
    return make_split(dataset, ds["train_classes"], ds["val_classes"], ds.get("split_seed", 0))


def build_architecture(exp: ExperimentConfig, in_shape, n_outputs=1):
    opts = dict(exp.model_options)
    if exp.architecture == "siam1":
        model = build_siam1(in_shape, n_outputs=n_outputs, **opts)
    elif exp.architecture == "siam2":
        model = build_siam2(in_shape, n_outputs=n_outputs, **opts)
    elif exp.architecture == "wrn_siamese":
        model = build_wrn_siamese(opts.get("depth", 40), opts.get("k", 2), in_shape,
                                  n_outputs=n_outputs)
    else:
        if "wrn_depth" in opts:
            cfg = SrpnConfig.from_wrn(opts["wrn_depth"], opts.get("k", 2), in_shape[0])
        else:
            cfg = SrpnConfig(in_channels=in_shape[0], **opts)
        model = build_srpn(cfg, n_outputs=n_outputs)
    return model.to(dtype=getattr(torch, exp.dtype))


def _oneshot_monitor(exp, dataset, split):
    mon = exp.monitor
    if not mon.get("oneshot"):
        return None
    if len(split.validation) < exp.eval.n_way:
        warnings.warn("too few validation classes for one-shot monitoring; disabled")
        return None
    cfg = EvalConfig(n_way=exp.eval.n_way, k_shot=exp.eval.k_shot,
                     num_tests=int(mon.get("num_tests", 20)),
                     runs_per_test=int(mon.get("runs_per_test", 10)), seed=exp.seed)
    return lambda model: run_protocol(model_scorer(model), dataset, split.validation,
                                      cfg, keep_log=False).accuracy


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    exp = load_config(args.config)
    out = exp.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise UserError(f"output directory {out} is in use by another run")
    try:
        return _train(exp, out, args.resume)
    finally:
        lock.release()


def _train(exp: ExperimentConfig, out: Path, resume: bool) -> int:
    for sub in ("checkpoints", "reports", "plots"):
        (out / sub).mkdir(exist_ok=True)
    exp.dump(out / "config.resolved.yaml")
    dataset = load_dataset(exp.dataset)
    split = split_for(dataset, exp.dataset)
    split.save(out / "split.json")
    meta = {"experiment": exp.to_dict()}
    latest = out / "checkpoints" / "latest.npz"
    if exp.gr and exp.architecture == "wrn_siamese":
        print(GR_DEEP_CAVEAT)
    torch.manual_seed(exp.seed)
    in_shape = dataset.image_shape
    monitor = _oneshot_monitor(exp, dataset, split)
    ctx = deterministic() if exp.deterministic else contextlib.nullcontext()
    try:
        with ctx:
            if exp.gr:
                disc = build_architecture(exp, in_shape, n_outputs=3)
                gen = Generator(in_shape, exp.generator_widths, exp.corruption).to(disc.head.weight.dtype)
                state = (resume_adversarial(latest, gen, disc, exp.train)
                         if resume and latest.exists() else None)
                state = train_adversarial(gen, disc, dataset, split, exp.train,
                                          corruption=exp.corruption, state=state,
                                          out_dir=out, oneshot_eval=monitor, meta=meta)
            else:
                model = build_architecture(exp, in_shape)
                state = (resume_training(latest, model, exp.train)
                         if resume and latest.exists() else None)
                state = train_similarity(model, dataset, split, exp.train, state=state,
                                         out_dir=out, oneshot_eval=monitor, meta=meta)
    except NumericalError as e:
        diag = out / "diagnostics.json"
        diag.write_text(json.dumps({"error": str(e), **e.snapshot}, indent=1))
        print(f"error: {e}; diagnostics written to {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {state.step} updates; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _experiment_from_checkpoint(ck) -> ExperimentConfig:
    doc = ck.meta.get("meta", {}).get("experiment")
    if doc is None:
        raise UserError("checkpoint carries no experiment config; pass --config")
    return from_dict(doc, check_paths=False)


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.baseline is None:
        raise UserError("pass --checkpoint PATH or --baseline pixel")
    ck = None
    if args.config:
        exp = load_config(args.config, check_paths=False)
    elif args.checkpoint:
        ck = ckpt.load_checkpoint(args.checkpoint)
        exp = _experiment_from_checkpoint(ck)
    else:
        exp = None
    ds = dict(exp.dataset) if exp else {"kind": args.dataset, "train_classes": 0,
                                         "val_classes": 0}
    if args.data_root:
        ds["root"] = args.data_root
    if args.dataset:
        ds["kind"] = args.dataset
    if ds.get("kind") not in ("omniglot", "image_folder"):
        raise UserError("pass --dataset omniglot|image_folder (or --config)")
    if not ds.get("root") or not Path(ds["root"]).is_dir():
        raise UserError(f"dataset root {ds.get('root')} does not exist (use --data-root)")
    if exp is None and args.baseline is None:
        raise UserError("--checkpoint needs an experiment config")
    dataset = load_dataset(ds)
    if exp is not None and args.train_classes is None:
        split = split_for(dataset, ds)
        classes = split.validation if args.part == "validation" else split.test
    else:
        # first 1200 Omniglot / 80 image-folder classes are training classes
        default_cut = 1200 if ds["kind"] == "omniglot" else 80
        cut = args.train_classes if args.train_classes is not None else default_cut
        if cut >= dataset.num_classes:
            raise UserError(f"--train-classes {cut} leaves no test classes "
                            f"(dataset has {dataset.num_classes})")
        classes = tuple(range(cut, dataset.num_classes))

    base = exp.eval if exp else EvalConfig()
    cfg = EvalConfig(n_way=args.n_way or base.n_way, k_shot=args.k_shot or base.k_shot,
                     num_tests=args.num_tests or base.num_tests,
                     runs_per_test=args.runs_per_test or base.runs_per_test,
                     seed=base.seed if args.seed is None else args.seed,
                     aggregate=args.aggregate or base.aggregate)

    if args.baseline == "pixel":
        scorer, tag = pixel_distance_scorer, "pixel"
    else:
        if ck is None:
            ck = ckpt.load_checkpoint(args.checkpoint)
        model = build_model(ck.spec("model"))
        ckpt.restore_module(model, ck, "model")
        want = tuple(ck.spec("model")["config"].get("in_shape") or
                     (ck.spec("model")["config"].get("in_channels"),) + dataset.image_shape[1:])
        if want != dataset.image_shape:
            raise UserError(f"model expects inputs {want}, dataset has {dataset.image_shape}")
        scorer, tag = model_scorer(model), ck.spec("model")["architecture_tag"]

    report = run_protocol(scorer, dataset, classes, cfg)
    if args.out:
        path = Path(args.out)
    else:
        root = exp.resolved_output_dir() if exp else Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
        path = root / "reports" / (f"eval_{tag}_{cfg.n_way}way{cfg.k_shot}shot"
                                   f"_{cfg.num_tests}x{cfg.runs_per_test}_seed{cfg.seed}.json")
    report.save(path)
    lo, hi = report.ci95
    print(f"{tag}: {cfg.n_way}-way {cfg.k_shot}-shot accuracy {100 * report.accuracy:.2f}% "
          f"(95% CI {100 * lo:.2f}-{100 * hi:.2f}) over {report.total} queries -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- generate

def _load_conditioning(folder: Path, in_shape, invert: bool) -> np.ndarray:
    from PIL import Image

    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise UserError(f"no conditioning images in {folder}")
    c, h, w = in_shape
    out = []
    for f in files:
        with Image.open(f) as im:
            im = im.convert("L" if c == 1 else "RGB").resize((w, h), Image.BILINEAR)
            a = np.asarray(im, dtype=np.float32) / 255.0
        a = a[None] if c == 1 else a.transpose(2, 0, 1)
        out.append(1.0 - a if invert else a)
    return np.stack(out)


def image_grid(rows: np.ndarray) -> np.ndarray:
    """``(R, N, C, H, W)`` -> ``(C, R*H, N*W)`` mosaic."""
    r, n, c, h, w = rows.shape
    return rows.transpose(2, 0, 3, 1, 4).reshape(c, r * h, n * w)


def cmd_generate(args) -> int:
    from PIL import Image

    ck = ckpt.load_checkpoint(args.checkpoint)
    if "generator" not in ck.meta["models"]:
        raise UserError(f"{args.checkpoint} is not a generative-regularizer checkpoint")
    gen = Generator.from_spec(ck.spec("generator"))
    ckpt.restore_module(gen, ck, "generator")
    gen.eval()
    corruption = CorruptionConfig(**{**ck.spec("generator")["corruption"],
                                     **({"sigma": args.sigma} if args.sigma is not None else {}),
                                     **({"dropout_p": args.dropout_p} if args.dropout_p is not None else {})})
    exp_doc = ck.meta.get("meta", {}).get("experiment", {})
    invert = exp_doc.get("dataset", {}).get("kind") == "omniglot" if args.invert is None else args.invert
    cond = _load_conditioning(Path(args.condition), gen.in_shape, invert)
    dtype = next(gen.parameters()).dtype
    cond_t = torch.as_tensor(cond, dtype=dtype)
    noise = torch.Generator().manual_seed(args.seed)
    rows = [cond]
    with torch.no_grad():
        for _ in range(args.count):
            rows.append(gen(corrupt(cond_t, corruption, noise)).numpy().astype(np.float32))
    grid = np.clip(image_grid(np.stack(rows)), 0.0, 1.0)
    if args.out:
        path = Path(args.out)
    else:
        root = (from_dict(exp_doc, check_paths=False).resolved_output_dir() if exp_doc
                else Path(args.checkpoint).parent)
        path = root / "generated" / "grid.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = (grid * 255).round().astype(np.uint8)
    img = Image.fromarray(pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0))
    img.save(path)
    np.save(path.with_suffix(".npy"), grid)
    print(f"wrote {len(rows)}x{len(cond)} grid to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- plot

PLOTS = (
    ("weight_ratio", "weight_ratio.png", "mean |w| ratio (reference / model)"),
    ("accuracy", "accuracy.png", "accuracy"),
    ("asymmetry", "asymmetry.png", "mean |f(x, x_t) - f(x_t, x)|"),
)


def _series(cols, name):
    steps = cols["step"]
    if name == "accuracy":
        for key in ("oneshot_accuracy", "val_accuracy"):
            if any(v is not None for v in cols.get(key, [])):
                return key, [(s, v) for s, v in zip(steps, cols[key]) if v is not None]
        return "accuracy", []
    return name, [(s, v) for s, v in zip(steps, cols.get(name, [])) if v is not None]


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = [Path(p) for p in args.logs]
    parsed = []
    for p in logs:
        if not p.is_file():
            raise UserError(f"metrics log {p} does not exist")
        try:
            parsed.append(read_metrics(p))
        except ValueError as e:
            raise UserError(str(e))
    labels = args.labels or [p.parent.name or p.stem for p in logs]
    if len(labels) != len(logs):
        raise UserError("--labels must give one label per log")
    out = Path(args.out) if args.out else logs[0].parent / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for name, fname, ylabel in PLOTS:
        fig, ax = plt.subplots(figsize=(6, 4))
        drawn = False
        for cols, label in zip(parsed, labels):
            key, pts = _series(cols, name)
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, label=label)
                drawn = True
        if not drawn:
            plt.close(fig)
            warnings.warn(f"no {name} values in the given logs; skipping {fname}")
            continue
        ax.set_xlabel("update")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / fname, dpi=100)
        plt.close(fig)
        written += 1
    print(f"wrote {written} plot(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a similarity model (or GR pair)")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", action="store_true",
                   help="continue from checkpoints/latest.npz when present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="episodic N-way K-shot evaluation")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=["pixel"])
    e.add_argument("--config", help="experiment config (default: the checkpoint's)")
    e.add_argument("--dataset", choices=["omniglot", "image_folder"])
    e.add_argument("--data-root")
    e.add_argument("--train-classes", type=int,
                   help="treat classes from this index on as test classes")
    e.add_argument("--part", choices=["test", "validation"], default="test")
    e.add_argument("--n-way", type=int)
    e.add_argument("--k-shot", type=int)
    e.add_argument("--num-tests", type=int)
    e.add_argument("--runs-per-test", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--aggregate", choices=["mean", "max"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="image grid of generator variations")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--condition", required=True, help="folder of conditioning images")
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--sigma", type=float)
    g.add_argument("--dropout-p", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--invert", dest="invert", action="store_true", default=None)
    g.add_argument("--no-invert", dest="invert", action="store_false")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    pl = sub.add_parser("plot", help="plot metrics logs")
    pl.add_argument("logs", nargs="+")
    pl.add_argument("--labels", nargs="+")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UserError, ConfigError, IngestionError, IntegrityError, SamplingError,
            EvaluationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
