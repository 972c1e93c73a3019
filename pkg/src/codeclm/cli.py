"""``codeclm`` command line: every pipeline stage as a subcommand."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import bbpe
from .config import RunConfig
from .corpus import TokenStore, build_corpus, image_to_stream
from .errors import CodecLMError
from .images import decode_jpeg, list_images, load_image, save_png, tile
from .jpeg import CodecProfile, TableSet, canonicalize, count_mcus, default_tables, encode_image, parse_segments
from .jpeg.segments import parse_frame
from .jpeg.stream import CanonicalStream

log = logging.getLogger("codeclm")

STREAM_SUFFIX = ".jpgc"


def _parent_common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="JSON run config; flags override it")
    p.add_argument("--seed", type=int, metavar="N", help="seed for every random component")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads (default 1)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    return p


def _parent_sampling() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--top-k", type=int, metavar="K", help="keep the K most likely tokens (0 disables)")
    p.add_argument("--top-p", type=float, metavar="P", help="nucleus mass in (0, 1]")
    p.add_argument("--temperature", type=float, metavar="T", help="softmax temperature (0 = argmax)")
    p.add_argument("--max-new-tokens", type=int, metavar="N", help="generation length cap")
    return p


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file written by `train`")
    p.add_argument("--vocab", metavar="PATH", help="vocab.json written by `train-bpe`")
    p.add_argument("--tables", metavar="PATH", help="table sidecar (default: shipped tables for the profile)")


def build_parser() -> argparse.ArgumentParser:
    common, sampling = _parent_common(), _parent_sampling()
    parser = argparse.ArgumentParser(
        prog="codeclm",
        description="Generate images as canonical JPEG byte streams with an autoregressive transformer.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("encode-corpus", parents=[common], help="encode images into canonical streams")
    p.add_argument("images", help="directory of PNG / raw RGB / JPEG images")
    p.add_argument("--quality", type=int, help="JPEG quality (default 25)")
    p.add_argument("--restart-interval", type=int, help="MCUs per restart interval (default 1)")
    p.add_argument("--pad", action="store_true", help="edge-pad sizes that are not multiples of 16")

    p = sub.add_parser("train-bpe", parents=[common], help="learn BPE merges over canonical streams")
    p.add_argument("streams", help="directory of canonical streams (*.jpgc) or images")
    p.add_argument("--vocab-size", type=int, default=bbpe.DEFAULT_VOCAB, help="total vocabulary incl. BOS/EOS")
    p.add_argument("--min-count", type=int, default=2, help="minimum pair count for a merge")

    p = sub.add_parser("build-store", parents=[common], help="tokenize images into a chunked token store")
    p.add_argument("images", help="directory of images")
    p.add_argument("--vocab", required=True, metavar="PATH", help="vocab.json")
    p.add_argument("--context-len", type=int, default=1024, help="tokens per training chunk")

    p = sub.add_parser("train", parents=[common], help="train the transformer on a token store")
    p.add_argument("--store", required=True, metavar="DIR", help="token store directory")
    p.add_argument("--resume", metavar="PATH", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--batch-size", type=int, help="chunks per batch")
    p.add_argument("--lr", type=float, help="peak learning rate (default 3e-4)")
    p.add_argument("--warmup", type=int, help="warmup steps (default 2%% of steps)")
    p.add_argument("--checkpoint-every", type=int, help="checkpoint cadence in steps")
    p.add_argument("--dim", type=int, help="model width")
    p.add_argument("--layers", type=int, help="transformer blocks")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--ffn-mult", type=int, help="feed-forward width multiplier")
    p.add_argument("--max-context", type=int, help="longest sequence the model accepts")

    p = sub.add_parser("sample", parents=[common, sampling], help="unconditional samples as JPEG files")
    _model_flags(p)
    p.add_argument("--n-samples", type=int, default=4, metavar="N", help="number of samples")

    p = sub.add_parser("complete", parents=[common, sampling], help="complete the rest of a partial image")
    p.add_argument("image", help="image file (PNG, raw RGB or JPEG)")
    _model_flags(p)
    p.add_argument("--ratio", type=float, required=True, metavar="R", help="fraction of MCUs kept as prompt")

    p = sub.add_parser("eval-bpb", parents=[common], help="held-out bits per byte")
    _model_flags(p)
    p.add_argument("--store", required=True, metavar="DIR", help="held-out token store")

    p = sub.add_parser("eval-decode-rate", parents=[common, sampling], help="fraction of samples that decode cleanly")
    _model_flags(p)
    p.add_argument("--n-samples", type=int, default=20, metavar="N", help="number of samples")

    p = sub.add_parser("eval-frechet", parents=[common], help="Fréchet distance between two image sets")
    p.add_argument("a", help="image directory or embeddings file")
    p.add_argument("b", help="image directory or embeddings file")

    p = sub.add_parser("inspect", parents=[common], help="dump the segment table and MCU map of a file")
    p.add_argument("file", help="JPEG file or canonical stream")
    p.add_argument("--hexdump", type=int, default=0, metavar="N", help="show the first N bytes of each segment")

    p = sub.add_parser("gallery", parents=[common], help="tile images into one PNG")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--cols", type=int, help="columns (default: square grid)")
    p.add_argument("--n-samples", type=int, metavar="N", help="tile at most N images")
    return parser


# -- helpers ----------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if getattr(args, "quality", None) is not None or getattr(args, "restart_interval", None) is not None:
        cfg = replace(cfg, profile=CodecProfile(
            quality=args.quality if args.quality is not None else cfg.profile.quality,
            restart_interval_mcus=args.restart_interval or cfg.profile.restart_interval_mcus,
        ))
    s = cfg.sample
    overrides = {k: getattr(args, a) for k, a in (("top_k", "top_k"), ("top_p", "top_p"),
                 ("temperature", "temperature"), ("max_new_tokens", "max_new_tokens"))
                 if getattr(args, a, None) is not None}
    if overrides:
        cfg = replace(cfg, sample=replace(s, **overrides))
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _tables(args, profile: CodecProfile) -> TableSet:
    return TableSet.load(args.tables, profile) if args.tables else default_tables(profile)


def _load_model(args):
    from .train import load_checkpoint

    if not args.checkpoint:
        raise CodecLMError("--checkpoint is required")
    state = load_checkpoint(args.checkpoint)
    state.model.eval()
    return state


def _load_vocab(args) -> bbpe.BpeVocab:
    if not args.vocab:
        raise CodecLMError("--vocab is required")
    return bbpe.BpeVocab.load(args.vocab)


# -- commands ---------------------------------------------------------------

def cmd_encode_corpus(args, cfg: RunConfig) -> dict:
    paths = list_images(args.images)
    if not paths:
        raise CodecLMError(f"no images found in {args.images}")
    out = _out(args, "corpus")
    streams_dir = out / "streams"
    streams_dir.mkdir(exist_ok=True)
    lengths = []
    tables = None
    for path in paths:
        try:
            raw = path.read_bytes()
            if raw[:2] != b"\xff\xd8":
                raw = encode_image(load_image(path), cfg.profile, pad=args.pad)
            stream, t = canonicalize(raw)
        except CodecLMError as e:
            raise type(e)(f"{path.name}: {e}") from e
        if tables is None:
            tables = t
        elif t != tables:
            raise CodecLMError(f"{path.name}: coding tables differ from the rest of the corpus")
        (streams_dir / (path.stem + STREAM_SUFFIX)).write_bytes(stream.data)
        lengths.append(len(stream.data))
    tables.save(out / "tables.bin", cfg.profile)
    summary = {"image_count": len(paths), "mean_stream_bytes": float(np.mean(lengths)),
               "median_stream_bytes": float(np.median(lengths)), "profile_hash": cfg.profile.hash}
    (out / "manifest.json").write_text(json.dumps(summary, indent=1) + "\n")
    cfg.write_resolved(out, "encode-corpus")
    return summary


def _streams_from(directory, profile: CodecProfile) -> list[bytes]:
    d = Path(directory)
    streams = sorted(d.glob("*" + STREAM_SUFFIX))
    if streams:
        return [p.read_bytes() for p in streams]
    return [image_to_stream(p, profile) for p in list_images(d)]


def cmd_train_bpe(args, cfg: RunConfig) -> dict:
    corpus = _streams_from(args.streams, cfg.profile)
    out = _out(args, "vocab")
    vocab = bbpe.train_bpe(corpus, args.vocab_size, args.min_count, cfg.profile.hash)
    vocab.save(out / "vocab.json")
    cfg.write_resolved(out, "train-bpe")
    return {"vocab_size": vocab.size, "merges": len(vocab.merges), "vocab_hash": vocab.hash,
            "documents": len(corpus)}


def cmd_build_store(args, cfg: RunConfig) -> dict:
    vocab = bbpe.BpeVocab.load(args.vocab)
    store = build_corpus(args.images, cfg.profile, vocab, args.context_len, cfg.threads)
    out = _out(args, "store")
    store.save(out)
    cfg.write_resolved(out, "build-store")
    m = store.manifest()
    return {k: m[k] for k in ("image_count", "token_count", "mean_doc_length", "median_doc_length",
                              "vocab_hash", "profile_hash", "n_chunks")}


def cmd_train(args, cfg: RunConfig) -> dict:
    from .train import fit

    store = TokenStore.load(args.store)
    out = _out(args, "run")
    mo = {k: getattr(args, a) for k, a in (("dim", "dim"), ("n_layers", "layers"), ("n_heads", "heads"),
          ("ffn_multiplier", "ffn_mult"), ("max_context", "max_context")) if getattr(args, a) is not None}
    model_cfg = replace(cfg.model, vocab_size=store.vocab_size, **mo)
    to = {k: getattr(args, a) for k, a in (("total_steps", "steps"), ("batch_size", "batch_size"),
          ("peak_lr", "lr"), ("warmup_steps", "warmup"), ("checkpoint_every", "checkpoint_every"))
          if getattr(args, a) is not None}
    train_cfg = replace(cfg.train, **to).resolved()
    cfg = replace(cfg, model=model_cfg, train=train_cfg)
    cfg.write_resolved(out, "train")
    state, records = fit(train_cfg, model_cfg, store, out, resume_from=args.resume)
    last = records[-1] if records else {}
    return {"steps": state.step, "final_loss": last.get("loss"), "checkpoint": str(out / "final.ckpt")}


def cmd_sample(args, cfg: RunConfig) -> dict:
    from .evalx import decode_success_rate

    state = _load_model(args)
    vocab = _load_vocab(args)
    out = _out(args, "samples")
    completions = []
    report = decode_success_rate(state.model, cfg.sample, args.n_samples, vocab, _tables(args, cfg.profile),
                                 keep_files=completions)
    files = []
    for i, c in enumerate(completions):
        if c.jpeg is not None:
            path = out / f"sample_{i:03d}.jpg"
            path.write_bytes(c.jpeg)
            files.append(path.name)
    cfg.write_resolved(out, "sample")
    summary = {"files": files, **report.to_dict()}
    (out / "report.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_complete(args, cfg: RunConfig) -> dict:
    from .sample import complete_image

    vocab = _load_vocab(args)
    if args.checkpoint:
        model = _load_model(args).model
    elif args.ratio >= 1.0:
        model = None  # the whole image is the prompt
    else:
        raise CodecLMError("--checkpoint is required for --ratio below 1")
    result = complete_image(model, args.image, args.ratio, cfg.sample, vocab, _tables(args, cfg.profile),
                            cfg.profile)
    out = _out(args, "completion")
    if result.jpeg is not None:
        (out / "completion.jpg").write_bytes(result.jpeg)
    cfg.write_resolved(out, "complete")
    summary = {"status": result.status, "prompt_mcus": result.prompt_mcus, "valid_mcus": result.valid_mcus,
               "total_mcus": result.total_mcus, "prompt_tokens": result.prompt_tokens,
               "generated_tokens": len(result.tokens) - result.prompt_tokens, "reason": result.reason,
               "file": "completion.jpg" if result.jpeg is not None else None}
    (out / "report.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_eval_bpb(args, cfg: RunConfig) -> dict:
    from .evalx import bits_per_byte

    state = _load_model(args)
    vocab = _load_vocab(args)
    store = TokenStore.load(args.store)
    bpb = bits_per_byte(state.model, store, vocab)
    summary = {"bits_per_byte": bpb, "step": state.step, "documents": store.n_docs}
    if args.out:
        cfg.write_resolved(_out(args, "."), "eval-bpb")
        (Path(args.out) / "eval_bpb.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_eval_decode_rate(args, cfg: RunConfig) -> dict:
    from .evalx import decode_success_rate

    state = _load_model(args)
    report = decode_success_rate(state.model, cfg.sample, args.n_samples, _load_vocab(args),
                                 _tables(args, cfg.profile))
    summary = report.to_dict()
    if args.out:
        cfg.write_resolved(_out(args, "."), "eval-decode-rate")
        (Path(args.out) / "eval_decode_rate.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def _feature_set(src):
    from .evalx import DEFAULT_EXTRACTOR, image_features, load_embeddings

    p = Path(src)
    if p.is_file():
        return load_embeddings(p)
    images = [load_image(x) for x in list_images(p)]
    if not images:
        raise CodecLMError(f"no images in {p}")
    return np.stack([image_features(im) for im in images]), DEFAULT_EXTRACTOR


def cmd_eval_frechet(args, cfg: RunConfig) -> dict:
    from .evalx import feature_stats, frechet_distance

    (xa, ea), (xb, eb) = _feature_set(args.a), _feature_set(args.b)
    d = frechet_distance(feature_stats(xa, ea), feature_stats(xb, eb))
    summary = {"frechet_distance": d, "n_a": len(xa), "n_b": len(xb), "dim": int(xa.shape[1]), "extractor": ea}
    if args.out:
        cfg.write_resolved(_out(args, "."), "eval-frechet")
        (Path(args.out) / "eval_frechet.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_inspect(args, cfg: RunConfig):
    data = Path(args.file).read_bytes()
    segs = parse_segments(data)
    lines = [f"{'#':>4}  {'offset':>8}  {'length':>7}  {'kind':<12}  name"]
    for i, s in enumerate(segs):
        lines.append(f"{i:>4}  {s.offset:>8}  {len(s):>7}  {s.kind:<12}  {s.name}")
        if args.hexdump:
            chunk = s.raw[:args.hexdump]
            for j in range(0, len(chunk), 16):
                row = chunk[j:j + 16]
                lines.append(f"{'':>14}{s.offset + j:08x}  {row.hex(' ')}")
    rst = sum(1 for s in segs if s.kind == "RSTn")
    has_tables = any(s.kind in ("DQT", "DHT") for s in segs)
    if has_tables:
        stream, tables = canonicalize(data)
        mcus = count_mcus(stream.data, tables)
    else:
        tables = default_tables(cfg.profile)
        mcus = count_mcus(data, tables)
        frame = parse_frame(next(s for s in segs if s.kind == "SOF0").payload)
        offsets = tuple(s.offset for s in segs if s.kind == "RSTn")
        stream = CanonicalStream(data, offsets, frame.width, frame.height, cfg.profile)
    lines.append("")
    lines.append(f"segments: {len(segs)}  RSTn markers: {rst}  MCUs (Huffman walk): {mcus}  "
                 f"size: {stream.width}x{stream.height}  canonical: {'no' if has_tables else 'yes'}")
    interval = stream.profile.restart_interval_mcus
    lines.append(f"MCU map (byte offset where each {interval}-MCU restart interval's entropy data starts):")
    starts = [0] + [o + 2 for o in stream.mcu_offsets]
    header_end = stream.data.index(b"\xff\xda")
    header_end += 2 + int.from_bytes(stream.data[header_end + 2:header_end + 4], "big")
    starts[0] = header_end
    per_row = max(1, -(-stream.width // 16) // interval)
    for r in range(0, len(starts), per_row):
        lines.append("  row %3d: %s" % (r // per_row, " ".join(f"{x:6d}" for x in starts[r:r + per_row])))
    print("\n".join(lines))
    return None


def cmd_gallery(args, cfg: RunConfig) -> dict:
    paths = []
    for src in args.inputs:
        p = Path(src)
        paths.extend(list_images(p) if p.is_dir() else [p])
    if args.n_samples:
        paths = paths[:args.n_samples]
    images = []
    for p in paths:
        raw = p.read_bytes()
        images.append(decode_jpeg(raw) if raw[:2] == b"\xff\xd8" else load_image(p))
    grid = tile(images, args.cols)
    out = _out(args, "gallery")
    save_png(out / "gallery.png", grid)
    cfg.write_resolved(out, "gallery")
    return {"file": str(out / "gallery.png"), "images": len(images)}


COMMANDS = {
    "encode-corpus": cmd_encode_corpus,
    "train-bpe": cmd_train_bpe,
    "build-store": cmd_build_store,
    "train": cmd_train,
    "sample": cmd_sample,
    "complete": cmd_complete,
    "eval-bpb": cmd_eval_bpb,
    "eval-decode-rate": cmd_eval_decode_rate,
    "eval-frechet": cmd_eval_frechet,
    "inspect": cmd_inspect,
    "gallery": cmd_gallery,
}


def _setup_logging() -> None:
    level = os.environ.get("CODECLM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        cfg = _run_config(args)
        torch.set_num_threads(max(1, cfg.threads))
        result = COMMANDS[args.command](args, cfg)
    except Exception as e:  # report every failure as a structured message, never a traceback
        log.debug("command failed", exc_info=True)
        kind = type(e).__name__ if isinstance(e, (CodecLMError, OSError, ValueError)) else f"internal:{type(e).__name__}"
        err = {"error": kind, "message": str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    if result is not None:
        _emit(result)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
