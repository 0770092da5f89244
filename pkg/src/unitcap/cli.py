"""Command-line surface for the full pipeline.

Every subcommand is deterministic given its flags and seeds. Configuration
can come from a flat key=value text file via ``--config``; explicit flags
win over the file, the file wins over built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen
from .bits import format_bits_report, report
from .core import DataFormatError, dedup, read_codebook, read_units, write_codebook, write_units
from .image_units import encode_image, patchify, read_ppm, write_grid
from .metrics import EvalPair, format_metric_report, score_corpus
from .model import (
    DivergenceError,
    ModelConfig,
    TrainHyper,
    generate,
    init_random,
    init_transfer,
    load_checkpoint,
    pretrain_text,
    save_checkpoint,
    train,
)
from .quantizer import assign, kmeans_fit, read_features, read_features_text

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def _load_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataFormatError(f"config line is not key=value: {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    overrides = {}
    for key, raw in config.items():
        action = actions.get(key)
        if action is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            overrides[key] = raw.lower() in ("1", "true", "yes")
        elif action.type is not None:
            overrides[key] = action.type(raw)
        else:
            overrides[key] = raw
    parser.set_defaults(**overrides)


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--ff-dim", type=int, default=256)
    p.add_argument("--max-unit-len", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.0)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-steps", type=int, default=20)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="unitcap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic paired corpus")
    _add_config_flag(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="number of items")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--n-units", type=int, default=32)
    p.add_argument("--feat-dim", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-codebook", help="fit a K-means codebook")
    _add_config_flag(p)
    p.add_argument("--modality", choices=("speech", "image"), required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--in", dest="inp", required=True, help="corpus manifest")
    p.add_argument("--out", required=True, help="codebook file")
    p.add_argument("--patch-size", type=int, default=4, help="image patch size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_train_codebook)

    p = sub.add_parser("encode", help="quantize features or images into unit streams")
    _add_config_flag(p)
    p.add_argument("--modality", choices=("speech", "image"), required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--in", dest="inp", required=True,
                   help="corpus manifest (.tsv) or a single feature/PPM file")
    p.add_argument("--out", required=True,
                   help="output directory (manifest mode) or file (single mode)")
    p.add_argument("--no-dedup", action="store_true",
                   help="keep sequential repetitions (speech only)")
    p.add_argument("--patch-size", type=int, default=4)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("pretrain-text", help="train the image-to-text model")
    _add_config_flag(p)
    p.add_argument("--corpus", required=True, help="corpus manifest")
    p.add_argument("--image-codebook", required=True)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--checkpoint", required=True, help="output checkpoint")
    p.add_argument("--trace-out", help="loss trace TSV (default: checkpoint + .trace.tsv)")
    p.add_argument("--unit-vocab", type=int, default=32,
                   help="recorded for later transfer to the unit task")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain_text)

    p = sub.add_parser("train", help="train the unit decoder")
    _add_config_flag(p)
    p.add_argument("--corpus", required=True, help="corpus manifest")
    p.add_argument("--units-manifest",
                   help="id->unit-stream manifest for targets (default: corpus units)")
    p.add_argument("--image-codebook", required=True)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--init", choices=("random", "transfer"), default="transfer")
    p.add_argument("--pretrained", help="text checkpoint for --init transfer")
    p.add_argument("--checkpoint", required=True, help="output checkpoint")
    p.add_argument("--trace-out", help="loss trace TSV (default: checkpoint + .trace.tsv)")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode unit captions for images")
    _add_config_flag(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-codebook", required=True)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--in", dest="inp", required=True,
                   help="corpus manifest (.tsv) or a single PPM file")
    p.add_argument("--out", required=True,
                   help="output directory (manifest mode) or unit-stream file")
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--beam-size", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score hypothesis unit streams against references")
    _add_config_flag(p)
    p.add_argument("--hyp-manifest", required=True)
    p.add_argument("--ref-manifest", required=True,
                   help="id->stream(s) manifest, or a corpus manifest (units column)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bits-report", help="storage comparison of representations")
    _add_config_flag(p)
    p.add_argument("--image-h", type=int, default=224)
    p.add_argument("--image-w", type=int, default=224)
    p.add_argument("--image-c", type=int, default=3)
    p.add_argument("--image-depth", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--image-units", type=int, default=8192)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--audio-depth", type=int, default=16)
    p.add_argument("--mel-fps", type=int, default=100)
    p.add_argument("--mel-dims", type=int, default=80)
    p.add_argument("--mel-depth", type=int, default=32)
    p.add_argument("--factor", type=int, default=320)
    p.add_argument("--speech-units", type=int, default=200)
    p.add_argument("--prededup-len", type=int, default=None)
    p.add_argument("--dedup-len", type=int, default=None)
    p.set_defaults(func=cmd_bits_report)

    return parser


def cmd_gen_data(args) -> int:
    corpus = datagen.gen_corpus(
        seed=args.seed,
        n_items=args.n,
        image_size=args.image_size,
        patch_size=args.patch_size,
        n_units=args.n_units,
        feat_dim=args.feat_dim,
    )
    manifest = datagen.write_corpus(corpus, args.out)
    print(manifest)
    return 0


def cmd_train_codebook(args) -> int:
    entries = datagen.read_manifest(args.inp)
    if not entries:
        raise DataFormatError(f"manifest {args.inp} lists no items")
    if args.modality == "speech":
        pooled = np.concatenate(
            [read_features(e.features_path).frames for e in entries], axis=0
        )
    else:
        pooled = np.concatenate(
            [patchify(read_ppm(e.image_path), args.patch_size).frames for e in entries],
            axis=0,
        )
    cb = kmeans_fit(pooled, args.k, seed=args.seed, max_iters=args.max_iters, tol=args.tol)
    write_codebook(cb, args.out)
    print(args.out)
    return 0


def _read_feature_file(path):
    path = Path(path)
    if path.suffix == ".txt":
        return read_features_text(path)
    return read_features(path)


def _speech_units_for(path, cb, no_dedup: bool):
    seq = assign(cb, _read_feature_file(path))
    return seq if no_dedup else dedup(seq)


def cmd_encode(args) -> int:
    cb = read_codebook(args.codebook)
    inp = Path(args.inp)
    if inp.suffix == ".tsv":
        entries = datagen.read_manifest(inp)
        out = Path(args.out)
        sub = "units" if args.modality == "speech" else "grids"
        (out / sub).mkdir(parents=True, exist_ok=True)
        lines = ["# id\tunits"]
        for e in entries:
            rel = f"{sub}/{e.item_id}.ucu"
            if args.modality == "speech":
                write_units(_speech_units_for(e.features_path, cb, args.no_dedup), out / rel)
            else:
                grid = encode_image(read_ppm(e.image_path), cb, args.patch_size)
                write_grid(grid, out / rel)
            lines.append(f"{e.item_id}\t{rel}")
        manifest = out / "encoded.tsv"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(manifest)
    else:
        if args.modality == "speech":
            write_units(_speech_units_for(inp, cb, args.no_dedup), args.out)
        else:
            write_grid(encode_image(read_ppm(inp), cb, args.patch_size), args.out)
        print(args.out)
    return 0


def _encoded_grids(entries, cb, patch_size):
    grids = []
    shape = None
    for e in entries:
        grid = encode_image(read_ppm(e.image_path), cb, patch_size)
        if shape is None:
            shape = (grid.grid_h, grid.grid_w)
        elif shape != (grid.grid_h, grid.grid_w):
            raise DataFormatError("corpus images have mixed grid shapes")
        grids.append(grid)
    return grids, shape


def _hyper(args) -> TrainHyper:
    return TrainHyper(
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def _write_trace(trace, args) -> None:
    path = Path(args.trace_out or (args.checkpoint + ".trace.tsv"))
    lines = ["# step\tloss"]
    lines += [f"{i}\t{loss:.10f}" for i, loss in enumerate(trace)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_pretrain_text(args) -> int:
    entries = datagen.read_manifest(args.corpus)
    if not entries:
        raise DataFormatError("empty corpus manifest")
    cb = read_codebook(args.image_codebook)
    grids, (gh, gw) = _encoded_grids(entries, cb, args.patch_size)
    config = ModelConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        ff_dim=args.ff_dim,
        max_grid_h=gh,
        max_grid_w=gw,
        max_unit_len=args.max_unit_len,
        unit_vocab=args.unit_vocab,
        text_vocab=len(datagen.VOCAB),
        image_unit_vocab=cb.k,
        dropout=args.dropout,
        seed=args.seed,
    )
    model = init_random(config, seed=args.seed, task="text")
    corpus = [(g, np.asarray(e.text_tokens)) for g, e in zip(grids, entries)]
    model, trace = pretrain_text(model, corpus, _hyper(args))
    save_checkpoint(model, args.checkpoint)
    _write_trace(trace, args)
    print(args.checkpoint)
    return 0


def _read_units_manifest(path) -> list[tuple[str, list[Path]]]:
    """Generic id -> stream(s) manifest; 5-column corpus manifests also accepted."""
    path = Path(path)
    base = path.parent
    rows: list[tuple[str, list[Path]]] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) == 5:  # corpus manifest: use the units column
            rows.append((cols[0], [base / cols[3]]))
        elif len(cols) >= 2:
            rows.append((cols[0], [base / c for c in cols[1:]]))
        else:
            raise DataFormatError(f"manifest line needs id and path(s): {line!r}")
    return rows


def cmd_train(args) -> int:
    entries = datagen.read_manifest(args.corpus)
    if not entries:
        raise DataFormatError("empty corpus manifest")
    cb = read_codebook(args.image_codebook)
    grids, (gh, gw) = _encoded_grids(entries, cb, args.patch_size)
    if args.units_manifest:
        by_id = dict(_read_units_manifest(args.units_manifest))
        try:
            unit_paths = [by_id[e.item_id][0] for e in entries]
        except KeyError as exc:
            raise DataFormatError(f"units manifest is missing item {exc}") from exc
    else:
        unit_paths = [e.units_path for e in entries]
    targets = [read_units(p) for p in unit_paths]
    vocabs = {t.vocab_size for t in targets}
    if len(vocabs) != 1:
        raise DataFormatError(f"unit streams disagree on vocab_size: {sorted(vocabs)}")
    unit_vocab = vocabs.pop()

    if args.init == "transfer":
        if not args.pretrained:
            raise UsageError("--init transfer requires --pretrained")
        pretrained = load_checkpoint(args.pretrained)
        config = replace(pretrained.config, unit_vocab=unit_vocab, seed=args.seed)
        model = init_transfer(pretrained, config, seed=args.seed)
    else:
        config = ModelConfig(
            d_model=args.d_model,
            n_layers=args.n_layers,
            n_heads=args.n_heads,
            ff_dim=args.ff_dim,
            max_grid_h=gh,
            max_grid_w=gw,
            max_unit_len=args.max_unit_len,
            unit_vocab=unit_vocab,
            text_vocab=len(datagen.VOCAB),
            image_unit_vocab=cb.k,
            dropout=args.dropout,
            seed=args.seed,
        )
        model = init_random(config, seed=args.seed, task="units")
    corpus = list(zip(grids, targets))
    model, trace = train(model, corpus, _hyper(args))
    save_checkpoint(model, args.checkpoint)
    _write_trace(trace, args)
    print(args.checkpoint)
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cb = read_codebook(args.image_codebook)
    inp = Path(args.inp)
    if inp.suffix == ".tsv":
        entries = datagen.read_manifest(inp)
        out = Path(args.out)
        (out / "hyp").mkdir(parents=True, exist_ok=True)
        lines = ["# id\tunits"]
        unfinished = 0
        for e in entries:
            grid = encode_image(read_ppm(e.image_path), cb, args.patch_size)
            result = generate(model, grid, max_len=args.max_len, beam_size=args.beam_size)
            unfinished += 0 if result.reached_eos else 1
            rel = f"hyp/{e.item_id}.ucu"
            write_units(result.units, out / rel)
            lines.append(f"{e.item_id}\t{rel}")
        manifest = out / "hyp.tsv"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        if unfinished:
            print(f"warning: {unfinished} hypothesis(es) hit max_len without EOS", file=sys.stderr)
        print(manifest)
    else:
        grid = encode_image(read_ppm(inp), cb, args.patch_size)
        result = generate(model, grid, max_len=args.max_len, beam_size=args.beam_size)
        if not result.reached_eos:
            print("warning: hypothesis hit max_len without EOS", file=sys.stderr)
        write_units(result.units, args.out)
        print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    hyp_rows = _read_units_manifest(args.hyp_manifest)
    ref_rows = dict(_read_units_manifest(args.ref_manifest))
    pairs = []
    for item_id, paths in hyp_rows:
        if item_id not in ref_rows:
            raise DataFormatError(f"reference manifest is missing item {item_id!r}")
        hyp = read_units(paths[0])
        refs = tuple(tuple(read_units(p).tokens) for p in ref_rows[item_id])
        pairs.append(EvalPair(tuple(hyp.tokens), refs))
    if not pairs:
        raise DataFormatError("hypothesis manifest lists no items")
    print(format_metric_report(score_corpus(pairs)))
    return 0


def cmd_bits_report(args) -> int:
    rep = report(
        image_h=args.image_h,
        image_w=args.image_w,
        duration_s=args.duration,
        image_c=args.image_c,
        image_depth=args.image_depth,
        patch_size=args.patch_size,
        image_codebook=args.image_units,
        sample_rate=args.sample_rate,
        audio_depth=args.audio_depth,
        mel_fps=args.mel_fps,
        mel_dims=args.mel_dims,
        mel_depth=args.mel_depth,
        factor=args.factor,
        speech_codebook=args.speech_units,
        prededup_len=args.prededup_len,
        dedup_len=args.dedup_len,
    )
    print(format_bits_report(rep))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        config_path = None
        for i, token in enumerate(argv):
            if token == "--config" and i + 1 < len(argv):
                config_path = argv[i + 1]
            elif token.startswith("--config="):
                config_path = token.split("=", 1)[1]
        if config_path:
            _apply_config(parser, _load_config(config_path))
            for sub_action in parser._subparsers._group_actions:
                for sub_parser in sub_action.choices.values():
                    _apply_config(sub_parser, _load_config(config_path))
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
