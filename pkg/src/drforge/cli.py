"""Single command-line entry point wiring all modules.

Subcommands: synth | build-dataset | train | decode | eval | ctr-pcr | serve.
A simple key=value config file seeds defaults; explicit flags override it.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("drforge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """key = value lines; '#' comments; values stay strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def parse_mix(text: str):
    from .dataset import TaskMix
    parts = text.split(":")
    if len(parts) != 4:
        raise ConfigError("--mix wants loc:cls:rep:seg, four numbers")
    loc, cls_, rep, seg = (float(p) for p in parts)
    return TaskMix({"localization": loc, "classification": cls_,
                    "report": rep, "segmentation": seg})


def _apply_config(args: argparse.Namespace, subparser: argparse.ArgumentParser) -> None:
    """Fill in values from --config for flags left at their defaults."""
    if not getattr(args, "config", None):
        return
    known = {a.dest: a for a in subparser._actions}
    cfg = read_config(args.config)
    for key, raw in cfg.items():
        if key not in known or key in ("help", "config"):
            raise ConfigError(f"unknown config key {key!r}")
        action = known[key]
        if getattr(args, key) == action.default:
            value = action.type(raw) if action.type else raw
            setattr(args, key, value)


def _add_common(sp):
    sp.add_argument("--config", help="key=value config file (flags override)")
    sp.add_argument("--seed", type=int, default=0, help="master seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="drforge",
        description="multi-task instruction tuning for chest radiographs at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add_parser(name, **kw):
        subparsers[name] = sub.add_parser(
            name, formatter_class=argparse.ArgumentDefaultsHelpFormatter, **kw)
        return subparsers[name]

    p = add_parser("synth", help="generate a synthetic study corpus")
    _add_common(p)
    p.add_argument("--n", type=int, default=64, help="number of studies")
    p.add_argument("--image-size", type=int, default=64, help="square image size")
    p.add_argument("--out", default="corpus.npz", help="output corpus npz")

    p = add_parser("build-dataset", help="triplets plus CSV/JSON records")
    _add_common(p)
    p.add_argument("--corpus", default="corpus.npz", help="input corpus npz")
    p.add_argument("--out", default="dataset", help="output directory")
    p.add_argument("--bins", type=int, default=1000, help="coordinate bins")
    p.add_argument("--prompt-mode", default="Baseline",
                   choices=["Baseline", "Phrase", "PhraseGT"],
                   help="report-instruction prompt mode")

    p = add_parser("train", help="train the unified seq2seq model")
    _add_common(p)
    p.add_argument("--corpus", default="corpus.npz", help="input corpus npz")
    p.add_argument("--vocab", default=None, help="vocab manifest json (default: rebuild)")
    p.add_argument("--bins", type=int, default=1000, help="coordinate bins")
    p.add_argument("--out", default="model.npz", help="checkpoint path")
    p.add_argument("--curve", default="loss_curve.csv", help="loss curve csv")
    p.add_argument("--steps", type=int, default=200, help="training steps")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--d", type=int, default=64, help="model width")
    p.add_argument("--layers", type=int, default=2, help="transformer layers")
    p.add_argument("--heads", type=int, default=2, help="attention heads")
    p.add_argument("--max-len", type=int, default=128, help="max sequence length")
    p.add_argument("--dropout", type=float, default=0.1, help="dropout rate")
    p.add_argument("--mix", default="0.2:0.15:0.35:0.3",
                   help="task mix loc:cls:rep:seg")
    p.add_argument("--prompt-mode", default="Baseline",
                   choices=["Baseline", "Phrase", "PhraseGT"],
                   help="report-instruction prompt mode")
    p.add_argument("--preset", default="toy", choices=["toy", "paper"],
                   help="hyperparameter preset (paper: lr 1e-5, warmup 1e-7)")

    p = add_parser("decode", help="decode all task predictions")
    _add_common(p)
    p.add_argument("--model", default="model.npz", help="checkpoint path")
    p.add_argument("--corpus", default="corpus.npz", help="input corpus npz")
    p.add_argument("--out", default="predictions.jsonl", help="output jsonl")
    p.add_argument("--beam", type=int, default=6, help="beam width")
    p.add_argument("--max-len", type=int, default=0,
                   help="decode length cap (0: checkpoint max_len)")
    p.add_argument("--prompt-mode", default="Baseline",
                   choices=["Baseline", "Phrase", "PhraseGT"],
                   help="report-instruction prompt mode")

    p = add_parser("eval", help="score a predictions file")
    _add_common(p)
    p.add_argument("--pred", default="predictions.jsonl", help="predictions jsonl")
    p.add_argument("--out", default="metrics.json", help="metrics json")
    p.add_argument("--csv", default="metrics.csv", help="metrics csv")
    p.add_argument("--iou-thr", type=float, default=0.5, help="localization ACC threshold")

    p = add_parser("ctr-pcr", help="per-study clinical ratios and bands")
    _add_common(p)
    p.add_argument("--corpus", default="corpus.npz", help="input corpus npz")
    p.add_argument("--out", default="ctr_pcr.csv", help="output csv")

    p = add_parser("serve", help="run the reader-study service")
    _add_common(p)
    p.add_argument("--port", type=int, default=8765, help="listen port")
    p.add_argument("--log-dir", default="study_logs", help="session event logs")
    p.add_argument("--corpus", default=None, help="corpus npz for case images")
    return parser, subparsers


def _need_file(path, what: str):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_synth(args) -> int:
    from .dataset import gen_synthetic_corpus, save_corpus
    studies = gen_synthetic_corpus(seed=args.seed, n_studies=args.n,
                                   image_size=args.image_size)
    save_corpus(studies, args.out)
    log.info("wrote %d studies to %s", len(studies), args.out)
    print(f"synth: {len(studies)} studies -> {args.out}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    from .dataset import (build_corpus_triplets, corpus_vocab, load_corpus,
                          records_from_studies, write_records)
    _need_file(args.corpus, "corpus")
    studies = load_corpus(args.corpus)
    vocab = corpus_vocab(studies, n_bins=args.bins)
    triplets, skipped = build_corpus_triplets(studies, vocab,
                                              prompt_mode=args.prompt_mode)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "vocab.json"), "w", encoding="utf-8") as fh:
        fh.write(vocab.to_manifest())
    records = records_from_studies(studies, triplets, vocab)
    paths = write_records(records, args.out)
    print(f"build-dataset: {len(triplets)} triplets, records in {args.out}"
          + (f", skipped {skipped}" if skipped else ""))
    for name, path in paths.items():
        log.info("wrote %s record file: %s", name, path)
    return EXIT_OK


def _load_vocab_for(args, studies):
    from .codec import Vocab
    from .dataset import corpus_vocab
    if getattr(args, "vocab", None):
        _need_file(args.vocab, "vocab manifest")
        with open(args.vocab, encoding="utf-8") as fh:
            return Vocab.from_manifest(fh.read())
    return corpus_vocab(studies, n_bins=args.bins)


def cmd_train(args) -> int:
    from .dataset import build_corpus_triplets, load_corpus
    from .model import (ModelConfig, UnifiedModel, save_checkpoint, train,
                        write_loss_curve)
    _need_file(args.corpus, "corpus")
    studies = load_corpus(args.corpus)
    vocab = _load_vocab_for(args, studies)
    triplets, _ = build_corpus_triplets(studies, vocab, prompt_mode=args.prompt_mode)
    image_size = studies[0].image.shape[0]
    shape = dict(d=args.d, n_layers=args.layers, n_heads=args.heads,
                 image_size=image_size, patch_size=max(image_size // 4, 1),
                 max_len=args.max_len)
    if args.preset == "paper":
        # paper preset pins lr/warmup/dropout; structure flags still apply
        config = ModelConfig.paper(**shape)
    else:
        config = ModelConfig.toy(dropout=args.dropout, lr=args.lr, **shape)
    model = UnifiedModel(config, vocab, seed=args.seed)
    curve = train(model, triplets, {s.image_id: s.image for s in studies},
                  steps=args.steps, batch_size=args.batch, seed=args.seed,
                  mix=parse_mix(args.mix))
    save_checkpoint(model, args.out)
    write_loss_curve(args.curve, curve)
    print(f"train: {len(curve)} steps, final per-token loss {curve[-1][1]:.4f}"
          f" -> {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    from . import codec
    from .codec import MalformedSequence
    from .dataset import build_corpus_triplets, load_corpus
    from .model import beam_search, load_checkpoint
    _need_file(args.model, "checkpoint")
    _need_file(args.corpus, "corpus")
    model = load_checkpoint(args.model)
    studies = load_corpus(args.corpus)
    vocab = model.vocab
    triplets, _ = build_corpus_triplets(studies, vocab, prompt_mode=args.prompt_mode)
    images = {s.image_id: s.image for s in studies}
    max_len = args.max_len or model.config.max_len
    rows = []
    for t in triplets:
        best = beam_search(model, images[t.image_id], list(t.instr_ids),
                           width=args.beam, max_len=max_len)[0]
        row = {"image_id": t.image_id, "task": t.task, "instruction": t.instruction,
               "complete": best.complete}
        try:
            row["predicted"] = _render_ids(list(best.ids), t.task, vocab)
        except MalformedSequence:
            row["predicted"] = ""
            row["malformed"] = True
        row["target"] = _render_ids(list(t.target), t.task, vocab)
        if t.target in ((codec.BOS, codec.YES, codec.EOS), (codec.BOS, codec.NO, codec.EOS)):
            row["score"] = model.yes_no_score(images[t.image_id], list(t.instr_ids))
        rows.append(row)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"decode: {len(rows)} predictions -> {args.out}")
    return EXIT_OK


def _render_ids(ids, task: str, vocab) -> str:
    from . import codec
    from .geometry import format_flat
    if task == "localization":
        return format_flat(codec.decode_box(ids, vocab).as_list())
    if task == "segmentation":
        return format_flat(codec.decode_polygon(ids, vocab).as_flat())
    return codec.decode_text(ids, vocab)


def cmd_eval(args) -> int:
    from .geometry import BBox, Polygon, dice, parse_flat, rasterize
    from .metrics import (SingleClass, attribute_acc, auc, bleu, ce_metrics,
                          f1_acc, localization_scores, meteor_simplified,
                          rouge_l, write_metrics_csv, write_metrics_json)
    _need_file(args.pred, "predictions")
    rows = []
    with open(args.pred, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    metrics: dict = {}
    yn = [r for r in rows if r["task"] == "classification" and r["target"] in ("yes", "no")]
    if yn:
        scored = [(r.get("score", 0.5), 1 if r["target"] == "yes" else 0) for r in yn]
        metrics["classification/yes_no_acc"] = float(
            np.mean([r["predicted"] == r["target"] for r in yn]))
        try:
            metrics["classification/auc"] = auc(scored)
            best = f1_acc(scored)
            metrics["classification/f1"] = best["f1"]
            metrics["classification/threshold"] = best["threshold"]
        except SingleClass:
            log.warning("single-class yes/no pool; AUC/F1 skipped")
    open_cls = [r for r in rows if r["task"] in ("classification", "attribute")
                and r["target"] not in ("yes", "no")]
    if open_cls:
        metrics["classification/text_exact"] = float(
            np.mean([r["predicted"] == r["target"] for r in open_cls]))
    loc = [r for r in rows if r["task"] == "localization" and r.get("predicted")]
    if loc:
        cases = [(BBox(*parse_flat(r["predicted"])), BBox(*parse_flat(r["target"])))
                 for r in loc]
        scores = localization_scores(cases, iou_thr=args.iou_thr)
        metrics["localization/acc"] = scores["acc"]
        metrics["localization/miou"] = scores["miou"]
        metrics["localization/n_malformed"] = sum(
            1 for r in rows if r["task"] == "localization" and r.get("malformed"))
    seg = [r for r in rows if r["task"] == "segmentation" and r.get("predicted")]
    if seg:
        vals = []
        for r in seg:
            got = rasterize(Polygon.from_flat(parse_flat(r["predicted"])), 256, 256)
            want = rasterize(Polygon.from_flat(parse_flat(r["target"])), 256, 256)
            vals.append(dice(got, want))
        metrics["segmentation/dice"] = float(np.mean(vals))
    rep = [r for r in rows if r["task"] == "report"]
    if rep:
        pairs = [(r["predicted"], r["target"]) for r in rep]
        metrics["report/bleu1"] = float(np.mean([bleu(g, t, max_n=1) for g, t in pairs]))
        metrics["report/bleu4"] = float(np.mean([bleu(g, t, max_n=4) for g, t in pairs]))
        metrics["report/rouge_l"] = float(np.mean([rouge_l(g, t) for g, t in pairs]))
        metrics["report/meteor"] = float(
            np.mean([meteor_simplified(g, t) for g, t in pairs]))
        ce = ce_metrics(pairs)
        metrics["report/ce_precision_macro"] = ce["macro"]["precision"]
        metrics["report/ce_recall_macro"] = ce["macro"]["recall"]
        metrics["report/ce_f1_macro"] = ce["macro"]["f1"]
        metrics["report/ce_f1_micro"] = ce["micro"]["f1"]
        attr = attribute_acc(pairs)
        metrics["report/acc_severity"] = attr["acc_severity"]
        metrics["report/acc_location"] = attr["acc_location"]
    counts = {"classification": len(yn) + len(open_cls), "localization": len(loc),
              "segmentation": len(seg), "report": len(rep)}
    write_metrics_json(args.out, metrics, config={"iou_thr": args.iou_thr},
                       counts=counts)
    if args.csv:
        write_metrics_csv(args.csv, metrics)
    print(f"eval: {len(metrics)} metrics -> {args.out}")
    return EXIT_OK


def cmd_ctr_pcr(args) -> int:
    import csv as csv_mod

    from .dataset import load_corpus
    from .geometry import compute_ctr, compute_pcr
    _need_file(args.corpus, "corpus")
    studies = load_corpus(args.corpus)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["ImageID", "CTR", "CTRBand", "PCR", "PCRBand", "AffectedSide"])
        for s in studies:
            ctr = compute_ctr(s.contours["Heart"], s.contours["LungLeft"],
                              s.contours["LungRight"])
            if "Pneumothorax" in s.contours:
                from .prompts import pcr_band
                pcr = compute_pcr(s.contours["Pneumothorax"], s.contours["LungLeft"],
                                  s.contours["LungRight"])
                writer.writerow([s.image_id, f"{ctr.ratio:.6f}", ctr.band,
                                 f"{pcr.ratio:.6f}", pcr_band(pcr.ratio),
                                 pcr.affected_side])
            else:
                writer.writerow([s.image_id, f"{ctr.ratio:.6f}", ctr.band, "", "", ""])
    print(f"ctr-pcr: {len(studies)} studies -> {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .httpd import make_server
    from .study import StudyService
    images = {}
    if args.corpus:
        from .dataset import load_corpus
        _need_file(args.corpus, "corpus")
        images = {s.image_id: s.image for s in load_corpus(args.corpus)}
    service = StudyService(log_dir=args.log_dir, images=images)
    server = make_server(service, host="0.0.0.0", port=args.port)
    print(f"serve: study service on port {server.server_port}, logs in {args.log_dir}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "ctr-pcr": cmd_ctr_pcr,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DRFORGE_LOG", "WARNING"))
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, subparsers[args.command])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .dataset import DatasetError
    from .model import NonFiniteLoss
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, DatasetError, json.JSONDecodeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
