"""Single entry point wiring every pipeline stage.

Subcommands: train, eval, predict, relabel-export, serve, plot.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import plotting
from .autodiff import Tensor, bilinear_resize_array
from .captioning import Vocabulary
from .checkpoint import read_checkpoint
from .errors import ConfigError
from .fusion import CaptionGuidedSaliency
from .metrics import MetricsConfig, evaluate_dataset
from .server import make_server
from .training import Sample, load_training_checkpoint, run_schedule


def build_model(cfg: dict, vocab: Vocabulary) -> CaptionGuidedSaliency:
    rng = np.random.default_rng(cfg["seed"])
    return CaptionGuidedSaliency(
        rng,
        vocab,
        stage_configs=cfgmod.stage_configs(cfg),
        decoder_dim=cfg["model"]["decoder_dim"],
        guidance=tuple(cfg["model"]["guidance"]),
        joint_guidance=cfg["model"]["joint_guidance"],
        guidance_norm=cfg["model"]["guidance_norm"],
        caption_kwargs=cfgmod.caption_kwargs(cfg),
    )


def load_samples(root: Path, size: int, split: str) -> list[Sample]:
    records = datamod.list_sample_records(root, split)
    samples = []
    for rec in records:
        image, mask = datamod.load_pair(rec, size)
        samples.append(Sample(rec.image_path.name, image, mask, rec.caption))
    return samples


def _metrics_config(cfg: dict) -> MetricsConfig:
    return MetricsConfig(**cfg["metrics"])


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set)
    out = Path(args.out or cfg["out_dir"])
    size = cfg["train"]["image_size"]
    finetune_dir = cfgmod.require_dir(cfg, "data.finetune_dir")
    finetune = load_samples(finetune_dir, size, "finetune")
    pretrain: list[Sample] = []
    if cfg["train"]["pretrain_epochs"] > 0:
        pretrain = load_samples(cfgmod.require_dir(cfg, "data.pretrain_dir"), size, "pretrain")
    val = None
    if cfg["data"]["val_dir"]:
        val = load_samples(cfgmod.require_dir(cfg, "data.val_dir"), size, "val")

    if cfg["caption"]["vocab_path"]:
        vocab = Vocabulary.load(cfg["caption"]["vocab_path"])
    else:
        captions = [s.caption for s in pretrain + finetune if s.caption]
        vocab = Vocabulary.from_corpus(captions) if captions else Vocabulary([])
    model = build_model(cfg, vocab)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")

    final = run_schedule(
        model,
        pretrain,
        finetune,
        out,
        lr=cfg["train"]["lr"],
        pretrain_epochs=cfg["train"]["pretrain_epochs"],
        finetune_epochs=cfg["train"]["finetune_epochs"],
        batch_size=cfg["train"]["batch_size"],
        seed=cfg["seed"],
        augment=cfg["train"]["augment"],
        guidance=tuple(cfg["model"]["guidance"]),
        caption_steps=cfg["train"]["caption_steps"],
        caption_lr=cfg["train"]["caption_lr"],
        val=val,
        resume=args.resume,
        log_every=cfg["train"]["log_every"],
        lr_schedule=cfg["train"]["lr_schedule"],
        cfg_digest=cfgmod.config_digest(cfg),
    )
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set)
    report = evaluate_dataset(args.pred, args.gt, _metrics_config(cfg), jobs=args.jobs)
    out = Path(args.out)
    report.write(out)
    print(report.to_text().splitlines()[0])
    for line in report.to_text().splitlines()[1:9]:
        print(line)
    if report.skipped:
        print(f"skipped (missing counterpart): {', '.join(report.skipped)}", file=sys.stderr)
        return 1
    return 0


def _restore_model(cfg: dict, ckpt: str, vocab_path: str | None) -> CaptionGuidedSaliency:
    vpath = vocab_path or cfg["caption"]["vocab_path"]
    if vpath is None:
        candidate = Path(ckpt).parent / "vocab.txt"
        if not candidate.exists():
            raise ConfigError("caption.vocab_path is required to restore a model")
        vpath = candidate
    vocab = Vocabulary.load(vpath)
    model = build_model(cfg, vocab)
    load_training_checkpoint(ckpt, model, None)
    return model


def cmd_predict(args) -> int:
    cfg = cfgmod.load_config(args.config, args.set)
    model = _restore_model(cfg, args.ckpt, args.vocab)
    guidance = tuple(cfg["model"]["guidance"])
    if args.no_guidance:
        guidance = (False, False, False, False)
    size = cfg["train"]["image_size"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = sorted(Path(args.images).glob("*.png")) + sorted(Path(args.images).glob("*.jpg"))
    if not images:
        print(f"no images under {args.images}", file=sys.stderr)
        return 1
    for path in images:
        image = datamod.load_image(path, size)
        prob, caption = model.predict(Tensor(image), guidance)
        datamod.save_saliency_png(out / f"{path.stem}.png", prob.data)
        if args.overlays:
            _write_overlays(out / "overlays" / path.stem, model, caption, size)
    print(f"wrote {len(images)} saliency maps to {out}")
    return 0


def _write_overlays(folder: Path, model: CaptionGuidedSaliency, caption, size: int) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    words = [model.caption.vocab.tokens[t] for t in caption.tokens[1:-1]]
    (folder / "caption.txt").write_text(" ".join(words) + "\n", encoding="utf-8")
    for j, (word, attn) in enumerate(zip(words, caption.attention_maps)):
        heat = bilinear_resize_array(attn.data[None], size, size)[0]
        peak = heat.max()
        if peak > 0:
            heat = heat / peak
        datamod.save_saliency_png(folder / f"word_{j:02d}_{word}.png", heat)


def cmd_relabel_export(args) -> int:
    selections = datamod.load_selections(args.selections or Path(args.dataset) / "selections.jsonl")
    rows, unresolved = datamod.export_relabeled_dataset(
        selections, args.dataset, args.out, merge=args.merge
    )
    print(f"exported {len(rows)} masks to {args.out}")
    if unresolved:
        for item in unresolved:
            print(f"unresolved: {item}", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args) -> int:
    server = make_server(args.dataset, args.port, args.ui, args.export_dir)
    print(f"annotation API listening on http://127.0.0.1:{args.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def cmd_plot(args) -> int:
    written = plotting.plot_curves(args.curves, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgsod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training schedule")
    p.add_argument("-c", "--config")
    p.add_argument("--out")
    p.add_argument("--resume")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate prediction PNGs against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-c", "--config")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write saliency maps for a directory of images")
    p.add_argument("-c", "--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab")
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("relabel-export", help="materialize masks from selections")
    p.add_argument("--dataset", required=True)
    p.add_argument("--selections")
    p.add_argument("--out", required=True)
    p.add_argument("--merge", choices=["per-annotator", "majority"], default="per-annotator")
    p.set_defaults(func=cmd_relabel_export)

    p = sub.add_parser("serve", help="run the annotation API")
    p.add_argument("--dataset", required=True)
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--ui")
    p.add_argument("--export-dir")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("plot", help="render SVG charts from a curve CSV")
    p.add_argument("--curves", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
