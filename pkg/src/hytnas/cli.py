"""Command-line entry point.

Subcommands: synth, search, derive, train, predict, eval, ops-dump.
Every stage writes its artifacts plus a manifest (effective config, seed,
input hashes, package version) under --out, so a run can be reproduced
from the manifest alone. Exit codes: 0 success, 1 runtime failure,
2 usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, data as dio, genotype as gt, pipeline as pl, supernet as sn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, load_config
from .search_space import menu_as_dict
from .tensor import Tensor, no_grad, set_default_dtype


class UsageError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(*paths):
    hashes = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    hashes[full] = _sha256(full)
        elif os.path.isfile(p):
            hashes[p] = _sha256(p)
    return hashes


def _write_manifest(out_dir, command, cfg, inputs, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": inputs,
    }
    if extra:
        manifest.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_dataset(path, normalize=True):
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {path}")
    cube = dio.load_cube(path)
    if normalize and not cube.normalized:
        cube = dio.normalize(cube)
    return cube


def _config_from_args(args):
    overrides = {}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    elif os.environ.get("HYTNAS_SEED"):
        overrides["seed"] = int(os.environ["HYTNAS_SEED"])
    cfg = load_config(path=getattr(args, "config", None),
                      preset=getattr(args, "preset", None),
                      overrides=overrides)
    set_default_dtype(cfg.precision)
    return cfg


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named preset applied over the config")
    p.add_argument("--seed", type=int, help="global seed (falls back to $HYTNAS_SEED)")
    p.add_argument("--precision", dest="precision", choices=["f32", "f64"], default=None)
    cfg = RunConfig()
    for section_name in ("supernet", "sgd", "adam", "train", "transformer", "infer", "split"):
        section = getattr(cfg, section_name)
        for f in dataclasses.fields(section):
            flag = f"--{section_name}.{f.name}"
            if f.type == "bool" or isinstance(getattr(section, f.name), bool):
                p.add_argument(flag, dest=f"{section_name}.{f.name}", default=None,
                               type=lambda s: s.lower() in ("1", "true", "yes"),
                               metavar="BOOL")
            else:
                p.add_argument(flag, dest=f"{section_name}.{f.name}", default=None,
                               type=type(getattr(section, f.name)))


def _split_for(cfg, cube):
    return pl.sample_split(cube.labels, cfg.split.n_train, cfg.split.n_val, cfg.split.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    spec = dio.SynthSpec(bands=args.bands, height=args.height, width=args.width,
                         num_classes=args.classes, layout=args.layout,
                         noise_std=args.noise, seed=args.seed or 0)
    cube = dio.synth_generate(spec)
    dio.save_cube(cube, args.out)
    _write_manifest(args.out, "synth", None, {}, extra={"synth_spec": dataclasses.asdict(spec)})
    print(f"wrote {spec.bands}x{spec.height}x{spec.width} cube "
          f"({spec.num_classes} classes) to {args.out}")
    return 0


def cmd_search(args):
    cfg = _config_from_args(args)
    cube = _load_dataset(args.data)
    split = _split_for(cfg, cube)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, "search", cfg, _hash_inputs(args.data))

    def progress(entry):
        msg = f"epoch {entry['epoch']:3d} [{entry['phase']}] loss {entry['train_loss']:.4f}"
        if "val_oa" in entry:
            msg += f" val_oa {entry['val_oa']:.4f}"
        print(msg, flush=True)

    net, record = sn.search(cfg, cube, split, out_dir=args.out, progress=progress)
    with open(os.path.join(args.out, "search_record.json"), "w") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
    print(f"best epoch {record.best_epoch} val_oa {record.best_val_oa:.4f}")
    print(f"checkpoint: {os.path.join(args.out, 'search_checkpoint.bin')}")
    return 0


def cmd_derive(args):
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    arrays, extra = load_checkpoint(args.checkpoint)
    genotype = gt.derive_from_search_checkpoint(arrays, extra)
    stats = gt.genotype_stats(genotype)
    os.makedirs(args.out, exist_ok=True)
    geno_path = os.path.join(args.out, "genotype.json")
    with open(geno_path, "w") as fh:
        fh.write(genotype.to_json())
    with open(os.path.join(args.out, "genotype_stats.json"), "w") as fh:
        json.dump(stats.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "genotype_stats.txt"), "w") as fh:
        fh.write(stats.to_text() + "\n")
    _write_manifest(args.out, "derive", None, _hash_inputs(args.checkpoint))
    print(stats.to_text())
    print(f"genotype: {geno_path}")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    cube = _load_dataset(args.data)
    if not os.path.isfile(args.genotype):
        raise UsageError(f"genotype not found: {args.genotype}")
    with open(args.genotype) as fh:
        genotype = gt.Genotype.from_json(fh.read())
    if genotype.bands != cube.bands or genotype.num_classes != cube.num_classes:
        raise UsageError(
            f"genotype was derived for {genotype.bands} bands / {genotype.num_classes} "
            f"classes, dataset has {cube.bands} / {cube.num_classes}")
    transformer = None if args.no_transformer else cfg.transformer
    net = gt.build_compact(genotype, transformer=transformer,
                           grid=(cfg.train.patch, cfg.train.patch), seed=cfg.seed)
    split = _split_for(cfg, cube)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, "train", cfg, _hash_inputs(args.data, args.genotype),
                    extra={"no_transformer": bool(args.no_transformer)})

    def progress(entry):
        print(f"iter {entry['iter']:5d} loss {entry['train_loss']:.4f} "
              f"val_oa {entry['val_oa']:.4f}", flush=True)

    trained = pl.train_compact(net, cube, split, cfg, progress=progress)
    ckpt = os.path.join(args.out, "model_checkpoint.bin")
    save_checkpoint(ckpt, trained.state, extra={
        "kind": "compact",
        "genotype": genotype.to_dict(),
        "config": cfg.to_dict(),
        "no_transformer": bool(args.no_transformer),
        "best": {"iter": trained.best_iter, "val_oa": trained.best_val_oa,
                 "val_loss": trained.best_val_loss},
    })
    with open(os.path.join(args.out, "train_log.json"), "w") as fh:
        json.dump(trained.log, fh, indent=2, sort_keys=True)
    print(f"best iter {trained.best_iter} val_oa {trained.best_val_oa:.4f}")
    print(f"model: {ckpt}")
    return 0


def load_compact_model(path):
    """Rebuild a compact network from a training checkpoint."""
    arrays, extra = load_checkpoint(path)
    if extra.get("kind") != "compact":
        raise UsageError(f"{path} is not a compact-model checkpoint")
    cfg = RunConfig.from_dict(extra["config"])
    genotype = gt.Genotype.from_dict(extra["genotype"])
    transformer = None if extra.get("no_transformer") else cfg.transformer
    net = gt.build_compact(genotype, transformer=transformer,
                           grid=(cfg.train.patch, cfg.train.patch), seed=cfg.seed)
    net.load_state_dict(arrays)
    net.eval()
    return net, cfg, extra


def cmd_predict(args):
    if not os.path.isfile(args.model):
        raise UsageError(f"model checkpoint not found: {args.model}")
    net, cfg, extra = load_compact_model(args.model)
    set_default_dtype(cfg.precision)
    cube = _load_dataset(args.data)
    window = args.window or cfg.infer.window
    if net.has_transformer and (window, window) != net.grid:
        raise UsageError(
            f"window {window} does not match the model's fixed grid {net.grid}")
    overlap = cfg.infer.overlap and not args.no_overlap

    def predict_fn(batch):
        with no_grad():
            return net(Tensor(batch)).data

    class_map, probs, counts = pl.infer_overlap(predict_fn, cube.data, window,
                                               cube.num_classes, overlap=overlap)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "prediction.bin"), {
        "class_map": class_map.astype(np.int32),
        "probs": probs.astype(np.float32),
        "coverage": counts.astype(np.int32),
    }, extra={"kind": "prediction", "config": cfg.to_dict(), "overlap": overlap,
              "window": window, "class_names": list(cube.class_names)})
    dio.export_classmap(class_map, dio.palette_for(cube.num_classes),
                        os.path.join(args.out, "classmap.ppm"))
    _write_manifest(args.out, "predict", cfg, _hash_inputs(args.data, args.model),
                    extra={"overlap": overlap, "window": window})
    if args.dump_attention:
        _dump_attention(net, cube, window, args.dump_attention)
    print(f"prediction written to {args.out} (overlap={'on' if overlap else 'off'})")
    return 0


def _dump_attention(net, cube, window, out_dir):
    if not net.has_transformer:
        raise UsageError("model has no attention blocks to dump")
    os.makedirs(out_dir, exist_ok=True)
    ys = pl.tile_positions(cube.height, window, window)
    xs = pl.tile_positions(cube.width, window, window)
    arrays, index = {}, []
    for y in ys:
        for x in xs:
            tile = cube.data[None, None, :, y : y + window, x : x + window]
            from .tensor import default_dtype

            with no_grad():
                _, attn_maps = net(Tensor(tile.astype(default_dtype())), return_attention=True)
            for b, attn in enumerate(attn_maps):
                key = f"tile_y{y}_x{x}/block{b}"
                arrays[key] = attn.data[0].astype(np.float32)
                index.append({"key": key, "y": y, "x": x, "block": b,
                              "shape": list(attn.data[0].shape)})
    save_checkpoint(os.path.join(out_dir, "attention.bin"), arrays,
                    extra={"kind": "attention", "window": window})
    with open(os.path.join(out_dir, "attention_index.json"), "w") as fh:
        json.dump({"window": window, "entries": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(args):
    if not os.path.isfile(args.pred):
        raise UsageError(f"prediction file not found: {args.pred}")
    arrays, extra = load_checkpoint(args.pred)
    if extra.get("kind") != "prediction":
        raise UsageError(f"{args.pred} is not a prediction file")
    cube = _load_dataset(args.data, normalize=False)
    cfg = RunConfig.from_dict(extra["config"])
    for field_ in ("n_train", "n_val", "seed"):
        value = getattr(args, f"split.{field_}".replace(".", "_"), None)
        if value is not None:
            setattr(cfg.split, field_, value)
    split = _split_for(cfg, cube)
    coords = {"train": split.train, "val": split.val, "test": split.test}[args.set]
    report = pl.compute_metrics(arrays["class_map"], cube.labels, coords, cube.num_classes)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    text = report.to_text(cube.class_names)
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(text + "\n")
    _write_manifest(args.out, "eval", cfg, _hash_inputs(args.data, args.pred),
                    extra={"eval_set": args.set})
    print(text)
    return 0


def cmd_ops_dump(args):
    text = json.dumps(menu_as_dict(), indent=2, sort_keys=True)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote candidate menus to {args.out}")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="hytnas", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled cube")
    p.add_argument("--out", required=True)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--layout", choices=["blocks", "voronoi"], default="blocks")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("search", help="run the supernet architecture search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="derive a genotype from a search checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train", help="train the compact network for a genotype")
    p.add_argument("--data", required=True)
    p.add_argument("--genotype", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-transformer", action="store_true",
                   help="ablation: train the pure convolutional network")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="dense prediction over a cube")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--no-overlap", action="store_true",
                   help="disable overlap averaging (stride = window)")
    p.add_argument("--dump-attention", metavar="DIR", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a prediction against labels")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="prediction.bin from predict")
    p.add_argument("--out", required=True)
    p.add_argument("--set", choices=["train", "val", "test"], default="test")
    p.add_argument("--split.n_train", dest="split_n_train", type=int, default=None)
    p.add_argument("--split.n_val", dest="split_n_val", type=int, default=None)
    p.add_argument("--split.seed", dest="split_seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ops-dump", help="dump the candidate operation menus as JSON")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ops_dump)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
