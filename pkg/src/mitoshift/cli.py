"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
degeneracy error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data, metrics, stain, tta
from .backbone import EmbeddingHeads, VptViT, load_checkpoint
from .config import RunConfig
from .errors import ConfigError, DataError, MitoshiftError, NumericError
from .train import train_loop

log = logging.getLogger("mitoshift")

PRED_HEADER = ["image_path", "prob_atypical", "pred_label", "n_fallbacks"]
REF_FILES = {"macenko": "reference_macenko.txt", "vahadane": "reference_vahadane.txt"}


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    return cfg


def _save_config(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg.save(path)


def load_references(directory) -> dict:
    d = Path(directory)
    return {k: stain.StainModel.load(d / f) for k, f in REF_FILES.items() if (d / f).is_file()}


def save_references(refs: dict, directory) -> None:
    for k, m in refs.items():
        m.save(Path(directory) / REF_FILES[k])


def fit_references(rgb) -> dict:
    """Both estimators on one patch; errors propagate."""
    return {k: stain.fit_reference(rgb, k) for k in REF_FILES}


def _first_fittable(images, limit: int = 50) -> Optional[dict]:
    for im in images[:limit]:
        try:
            return fit_references(im)
        except NumericError:
            continue
    return None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    records = data.gen_synth(cfg.synth(), out)
    _save_config(cfg, out / "config.txt")
    print(f"wrote {len(records)} images and manifest to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    tcfg = cfg.train()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    refs = None
    if args.embeddings:
        vectors, records = data.load_embeddings(args.embeddings)
        domains = sorted({r.domain for r in records})
        model = EmbeddingHeads(vectors.shape[1], cfg.vit().num_classes, max(2, len(domains)), tcfg.seed)
        tcfg.adaptation = "head_only"
        inputs = vectors
    else:
        if not args.manifest:
            raise ConfigError("train needs --manifest or --embeddings")
        vit = cfg.vit()
        records = data.load_manifest(args.manifest, side=vit.image_side)
        if not records:
            raise DataError("manifest has no records", args.manifest)
        inputs = data.load_images(args.manifest, records, vit.image_side)
        domains = sorted({r.domain for r in records})
        model = VptViT(vit, max(2, len(domains)), tcfg.seed, tcfg.adaptation)
        if cfg.values["reference"]:
            refs = load_references(cfg.values["reference"])
        else:
            refs = _first_fittable(inputs)
            if refs is None:
                log.warning("no patch suitable for fitting a stain reference")
        if refs:
            save_references(refs, out)
    result = train_loop(model, inputs, records, tcfg, out, targets=refs, domains=domains)
    _save_config(cfg, out / "config.txt")
    last = result.log[-1] if result.log else None
    if last:
        print(f"epoch {last['epoch']}: loss {last['train_loss']:.4f} "
              f"val BA {last['val_balanced_accuracy']:.4f} val AUC {last['val_auc']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _plan(args, cfg: RunConfig) -> tta.TtaPlan:
    if args.tta == "config":
        return cfg.tta_plan()
    return tta.TtaPlan.preset(args.tta)


def cmd_infer(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    threshold = cfg.threshold()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if isinstance(model, EmbeddingHeads):
        if not args.embeddings:
            raise ConfigError("this checkpoint was trained on embeddings; pass --embeddings")
        vectors, records = data.load_embeddings(args.embeddings)
        probs = model.predict_proba(vectors)[:, 1]
        rows = [(r.image_path, p, 0) for r, p in zip(records, probs)]
    else:
        if not args.manifest:
            raise ConfigError("infer needs --manifest")
        plan = _plan(args, cfg)
        side = model.cfg.image_side
        records = data.load_manifest(args.manifest, side=side)
        targets = {}
        if any(s != "identity" for s in plan.stains):
            ref_dir = args.reference or cfg.values["reference"] or Path(args.checkpoint).parent
            targets = load_references(ref_dir)
            missing = [s for s in plan.stains if s != "identity" and s not in targets]
            if missing:
                raise ConfigError(f"no reference target for {missing} in {ref_dir}")
        for r in records:
            im = data.read_image(data.resolve(args.manifest, r), side)
            p, fb = tta.predict_tta(model, im, plan, targets)
            rows.append((r.image_path, p, fb))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for path, p, fb in rows:
            w.writerow([path, f"{p:.17g}", int(p >= threshold), fb])
    _save_config(cfg, out.with_name(out.stem + ".config.txt"))
    n_fb = sum(r[2] for r in rows)
    print(f"wrote {len(rows)} predictions to {out} ({n_fb} stain fallbacks)")
    return 0


def read_predictions(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError("predictions file not found", p)
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PRED_HEADER:
            raise DataError(f"bad header {header!r}, expected {','.join(PRED_HEADER)}", p, 1)
        preds = {}
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                preds[row[0]] = float(row[1])
            except (IndexError, ValueError):
                raise DataError(f"bad prediction row {row!r}", p, n) from None
    return preds


def cmd_eval(args) -> int:
    cfg = _config(args)
    threshold = args.threshold if args.threshold is not None else cfg.threshold()
    preds = read_predictions(args.predictions)
    records = data.load_manifest(args.manifest, check_images=False)
    missing = [r.image_path for r in records if r.image_path not in preds]
    if missing:
        raise DataError(f"{len(missing)} manifest images have no prediction, e.g. {missing[0]}",
                        args.predictions)
    probs = np.array([preds[r.image_path] for r in records])
    labels = np.array([r.label for r in records])
    report = metrics.format_report({args.name: metrics.evaluate(probs, labels, threshold)})
    print(report, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report)
        _save_config(cfg, out.with_name(out.stem + ".config.txt"))
    return 0


def cmd_fit_reference(args) -> int:
    rgb = data.read_image(args.image)
    refs = fit_references(rgb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_references(refs, out)
    for k, m in refs.items():
        print(f"{k}: {m.to_text().strip()}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mitoshift", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="flat key=value run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="run seed (overrides config 'seed')")

    p = sub.add_parser("gen-synth", help="write a synthetic Beer-Lambert patch dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train class and domain heads with the chosen adaptation")
    common(p)
    p.add_argument("--manifest", help="CSV manifest image_path,label,domain")
    p.add_argument("--embeddings", help="MSEMB01 embeddings file (trains heads only)")
    p.add_argument("--out", required=True, help="output directory for checkpoint and metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict atypical probabilities with test-time augmentation")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="CSV manifest of patches to score")
    p.add_argument("--embeddings", help="embeddings file, for embedding-trained checkpoints")
    p.add_argument("--tta", default="full", choices=["off", "geo", "stain", "full", "config"],
                   help="off: plain forward; geo: 8 D4 transforms; stain: identity+Macenko+"
                        "Vahadane; full: 8x3; config: use tta_geo/tta_stains")
    p.add_argument("--reference", help="directory with reference_macenko.txt / reference_vahadane.txt "
                                       "(default: the checkpoint's directory)")
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="balanced accuracy, sensitivity, specificity, ROC AUC")
    common(p, seed=False)
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, help="probability threshold (default: config, 0.5)")
    p.add_argument("--name", default="mitoshift", help="method name in the report")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-reference", help="fit Macenko and Vahadane reference targets on one patch")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit_reference)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MitoshiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
