"""Command-line front-end for the full tile pipeline.

Subcommands: ingest, screen, filter, split, train, infer, eval,
ensemble, package, synth. Flags mirror module parameters; a single JSON
config document (``--config``) can preload any of them, and explicit
flags win over file values. Logs go to stderr; machine-readable output
goes to files or stdout only.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 runtime failure (e.g. non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import cloudscreen, curation, evalkit, fixtures, trainer
from .rastercore import (
    SAR_ROLES,
    BandRole,
    Sensor,
    TileFormatError,
    TileMeta,
    ingest_external,
    read_tile,
    read_tile_meta,
    write_tile,
)

log = logging.getLogger("sar2rgb")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_CONFIG_KEYS = {"seed", "heuristic", "filter_preset", "pair_policy", "train", "ensemble"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(obj) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return obj


def _default_seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("SAR2RGB_SEED")
    return int(env) if env else 0


def _heuristic_params(args, config: dict) -> cloudscreen.HeuristicParams:
    section = dict(config.get("heuristic", {}))
    unknown = set(section) - {"score_threshold", "brightness_threshold", "epsilon"}
    if unknown:
        raise ValueError(f"unknown heuristic config keys: {sorted(unknown)}")
    if getattr(args, "score_threshold", None) is not None:
        section["score_threshold"] = args.score_threshold
    if getattr(args, "brightness_threshold", None) is not None:
        section["brightness_threshold"] = args.brightness_threshold
    return cloudscreen.HeuristicParams(**section)


# --- subcommands -----------------------------------------------------------


def _cmd_synth(args, config):
    seed = _default_seed(args, config)
    records = fixtures.synth_fixture(args.n_pairs, args.size, args.cloud_fraction, seed,
                                     args.out)
    log.info("synth: wrote %d pairs under %s", len(records), args.out)
    print(str(Path(args.out) / fixtures.MANIFEST_NAME))
    return EXIT_OK


_KIND_SPECS = {
    "s1": (SAR_ROLES, Sensor.S1),
    "s2": ((BandRole.RED, BandRole.GREEN, BandRole.BLUE), Sensor.S2),
    "qa60": ((BandRole.QA60,), Sensor.QA60),
}


def _cmd_ingest(args, config):
    in_dir, out_dir = Path(args.in_path), Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: dict[str, dict[str, str]] = {}
    for path in sorted(in_dir.iterdir()):
        if not path.is_file():
            continue
        stem = path.stem
        if "_" not in stem:
            log.warning("ingest: skipping %s (expected <tile_id>_<s1|s2|qa60> name)", path.name)
            continue
        tile_id, _, kind = stem.rpartition("_")
        if kind not in _KIND_SPECS:
            log.warning("ingest: skipping %s (unknown kind %r)", path.name, kind)
            continue
        roles, sensor = _KIND_SPECS[kind]
        tile = ingest_external(path, roles, tile_id=tile_id, sensor=sensor)
        if kind == "s2" and args.s2_scale:
            tile = curation.normalize_s2_reflectance(tile, scale=args.s2_scale)
        name = f"{tile_id}_{kind}.s2tl"
        write_tile(tile, out_dir / name)
        records.setdefault(tile_id, {})[kind] = name

    s1_recs, s2_recs = [], []
    for tile_id, kinds in sorted(records.items()):
        if "s1" in kinds:
            s1_recs.append(curation.TileRecord(TileMeta(tile_id, sensor=Sensor.S1), kinds["s1"]))
        if "s2" in kinds:
            s2_recs.append(curation.TileRecord(TileMeta(tile_id, sensor=Sensor.S2), kinds["s2"]))
    policy_cfg = dict(config.get("pair_policy", {}))
    unknown = set(policy_cfg) - {"match_key", "max_day_gap"}
    if unknown:
        raise ValueError(f"unknown pair_policy config keys: {sorted(unknown)}")
    if "match_key" in policy_cfg:
        policy_cfg["match_key"] = curation.MatchKey(policy_cfg["match_key"])
    pairs = curation.pair_manifests(s1_recs, s2_recs, curation.PairPolicy(**policy_cfg))
    pairs = [
        p if records[p.pair_id].get("qa60") is None
        else curation.PairRecord(p.pair_id, p.s1_path, p.s2_path, records[p.pair_id]["qa60"])
        for p in pairs
    ]
    manifest = out_dir / fixtures.MANIFEST_NAME
    curation.write_pair_manifest(pairs, manifest)
    log.info("ingest: %d tiles, %d pairs", sum(len(k) for k in records.values()), len(pairs))
    print(str(manifest))
    return EXIT_OK


def _screen_one(item, params):
    tile_id, rgb_path, qa60_path = item
    rgb = read_tile(rgb_path)
    qa60 = read_tile(qa60_path) if qa60_path else None
    return cloudscreen.screen_tile(rgb, qa60, params)


def _cmd_screen(args, config):
    params = _heuristic_params(args, config)
    in_path = Path(args.in_path)
    items: list[tuple[str, Path, Path | None]] = []
    if in_path.is_dir():
        by_id: dict[str, dict[str, Path]] = {}
        for path in sorted(in_path.glob("*.s2tl")):
            meta = read_tile_meta(path)
            slot = by_id.setdefault(meta.tile_id, {})
            if meta.sensor is Sensor.S2:
                slot["s2"] = path
            elif meta.sensor is Sensor.QA60:
                slot["qa60"] = path
        for tile_id in sorted(by_id):
            slot = by_id[tile_id]
            if "s2" in slot:
                items.append((tile_id, slot["s2"], slot.get("qa60")))
    else:
        root = in_path.parent
        for pair in curation.read_pair_manifest(in_path):
            qa = root / pair.qa60_path if pair.qa60_path else None
            items.append((pair.pair_id, root / pair.s2_path, qa))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(lambda it: _screen_one(it, params), items))
    else:
        reports = [_screen_one(it, params) for it in items]

    with open(args.out, "w", encoding="utf-8") as fh:
        for report in reports:  # items are ordered, so output order is stable
            fh.write(report.to_json() + "\n")
    log.info("screen: %d reports -> %s", len(reports), args.out)
    return EXIT_OK


def _read_screen_reports(path) -> list[cloudscreen.ScreenReport]:
    reports = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                reports.append(cloudscreen.ScreenReport.from_json(line))
    return reports


def _cmd_filter(args, config):
    pairs = curation.read_pair_manifest(args.in_path)
    if args.screen:
        pairs = curation.attach_screens(pairs, _read_screen_reports(args.screen))
    preset = args.preset or config.get("filter_preset")
    if preset:
        spec = curation.filter_preset(preset)
    else:
        spec = curation.FilterSpec(
            max_nodata_ratio=args.max_nodata,
            max_qa60_cloud_ratio=args.max_qa60,
            max_heuristic_cloud_ratio=args.max_heuristic,
        )
    kept = curation.filter_dataset(pairs, spec)
    curation.write_pair_manifest(kept, args.out)
    log.info("filter: kept %d of %d pairs -> %s", len(kept), len(pairs), args.out)
    return EXIT_OK


def _cmd_split(args, config):
    seed = _default_seed(args, config)
    pairs = curation.read_pair_manifest(args.in_path)
    train_pairs, eval_pairs = curation.split_holdout(pairs, args.n, seed)
    curation.write_pair_manifest(train_pairs, args.out_train)
    curation.write_pair_manifest(eval_pairs, args.out_eval)
    log.info("split: %d train / %d eval (seed %d)", len(train_pairs), len(eval_pairs), seed)
    return EXIT_OK


def _load_pairs_with_tiles(manifest_path) -> list[tuple]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    return [curation.load_pair_tiles(p, root) for p in curation.read_pair_manifest(manifest_path)]


def _train_config(args, config) -> trainer.TrainConfig:
    section = dict(config.get("train", {}))
    cfg = trainer.config_from_dict(section) if section else trainer.TrainConfig()

    gen = cfg.generator
    gen_kw = {}
    if args.variant:
        gen_kw["variant"] = trainer.Variant(args.variant)
    if args.image_size:
        gen_kw["image_size"] = args.image_size
    if args.base_width:
        gen_kw["base_width"] = args.base_width
    if gen_kw:
        merged = {**_gen_as_dict(gen), **gen_kw}
        if merged["variant"] is trainer.Variant.SPADE:
            # keep the seed/upsampling invariant when only the size changes
            ratio = merged["image_size"] / merged["seed_size"]
            blocks = int(math.log2(ratio)) if ratio >= 2 else 0
            if merged["seed_size"] * 2**blocks == merged["image_size"]:
                merged["n_up_blocks"] = blocks
        gen = trainer.GeneratorConfig(**merged)

    loss = cfg.loss
    if args.gan_weight is not None or args.l1_weight is not None:
        loss = trainer.LossConfig(
            gan_weight=args.gan_weight if args.gan_weight is not None else loss.gan_weight,
            l1_weight=args.l1_weight if args.l1_weight is not None else loss.l1_weight,
            gan_kind=loss.gan_kind,
        )

    opt = cfg.optimizer
    if args.lr is not None:
        opt = trainer.OptimConfig(learning_rate=args.lr, beta1=opt.beta1, beta2=opt.beta2)

    # seed precedence: flag > train section of the config file > top-level/env
    if args.seed is not None:
        seed = args.seed
    elif "seed" in section:
        seed = cfg.seed
    else:
        seed = _default_seed(args, config)

    return trainer.TrainConfig(
        generator=gen,
        discriminator=cfg.discriminator,
        loss=loss,
        optimizer=opt,
        batch_size=args.batch_size if args.batch_size is not None else cfg.batch_size,
        max_steps=args.max_steps if args.max_steps is not None else cfg.max_steps,
        seed=seed,
        eval_every=args.eval_every if args.eval_every is not None else cfg.eval_every,
        deterministic=bool(args.deterministic) or cfg.deterministic,
    )


def _gen_as_dict(gen: trainer.GeneratorConfig) -> dict:
    return {
        "variant": gen.variant,
        "in_channels": gen.in_channels,
        "out_channels": gen.out_channels,
        "image_size": gen.image_size,
        "base_width": gen.base_width,
        "n_up_blocks": gen.n_up_blocks,
        "n_res_blocks": gen.n_res_blocks,
        "seed_size": gen.seed_size,
        "mod_hidden": gen.mod_hidden,
    }


def _cmd_train(args, config):
    cfg = _train_config(args, config)
    train_pairs = _load_pairs_with_tiles(args.in_path)
    eval_pairs = _load_pairs_with_tiles(args.eval) if args.eval else []
    ckpt, trace = trainer.train(cfg, train_pairs, eval_pairs)
    trainer.save_checkpoint(ckpt, args.out)
    if args.trace:
        trace.write_jsonl(args.trace)
    if trace.rows:
        last = trace.rows[-1]
        log.info(
            "train: %d steps, final total %.6f (l1 %.6f)",
            last.step, last.generator_total, last.l1_term,
        )
    log.info("train: checkpoint -> %s", args.out)
    return EXIT_OK


def _cmd_infer(args, config):
    ckpt = trainer.load_checkpoint(args.ckpt)
    in_path = Path(args.in_path)
    tiles = []
    if in_path.is_dir():
        for path in sorted(in_path.glob("*.s2tl")):
            meta = read_tile_meta(path)
            if meta.sensor is Sensor.S1:
                tiles.append(read_tile(path))
    else:
        root = in_path.parent
        for pair in curation.read_pair_manifest(in_path):
            tile = read_tile(root / pair.s1_path)
            # predictions are keyed by pair id downstream
            tiles.append(replace(tile, meta=replace(tile.meta, tile_id=pair.pair_id)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.jobs > 1:
        chunks = [tiles[i :: args.jobs] for i in range(args.jobs)]
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda ts: trainer.infer(ckpt, ts), chunks))
        preds = [t for chunk in results for t in chunk]
    else:
        preds = trainer.infer(ckpt, tiles)
    for pred in preds:
        write_tile(pred, out_dir / f"{pred.meta.tile_id}.s2tl")
    log.info("infer: %d predictions -> %s", len(preds), out_dir)
    return EXIT_OK


def _read_predictions(path) -> list[tuple[str, object]]:
    path = Path(path)
    preds = []
    for tile_path in sorted(path.glob("*.s2tl")):
        tile = read_tile(tile_path)
        preds.append((tile_path.stem, tile))
    if not preds:
        raise ValueError(f"no .s2tl predictions under {path}")
    return preds


def _cmd_eval(args, config):
    preds = _read_predictions(args.pred)
    manifest = Path(args.in_path)
    root = manifest.parent
    refs = []
    for pair in curation.read_pair_manifest(manifest):
        refs.append((pair.pair_id, read_tile(root / pair.s2_path)))
    report = evalkit.evaluate(preds, refs)
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"n={report.n_images} mae={report.mae_mean:.6f} psnr_db={report.psnr_mean_db:.4f}")
    return EXIT_OK


def _cmd_ensemble(args, config):
    section = dict(config.get("ensemble", {}))
    unknown = set(section) - {"members", "mode", "assignment"}
    if unknown:
        raise ValueError(f"unknown ensemble config keys: {sorted(unknown)}")
    member_dirs = args.in_path or section.get("members")
    if not member_dirs:
        raise ValueError("ensemble needs member prediction directories (--in)")
    mode = evalkit.EnsembleMode(args.mode or section.get("mode", "mean"))
    assignment = None
    if args.assign:
        assignment = json.loads(Path(args.assign).read_text(encoding="utf-8"))
    elif section.get("assignment"):
        assignment = section["assignment"]

    outputs = {}
    members = []
    for member_dir in member_dirs:
        name = Path(member_dir).name
        if name in outputs:
            raise ValueError(f"duplicate ensemble member name {name!r}")
        outputs[name] = _read_predictions(member_dir)
        members.append(name)
    spec = evalkit.EnsembleSpec(tuple(members), mode, assignment)
    combined = evalkit.ensemble(outputs, spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pid, tile in combined:
        write_tile(tile, out_dir / f"{pid}.s2tl")
    log.info("ensemble: %d members -> %d combined tiles in %s", len(members), len(combined),
             out_dir)
    return EXIT_OK


def _cmd_package(args, config):
    preds = _read_predictions(args.in_path)
    manifest = evalkit.package_submission(preds, args.out)
    log.info("package: %d tiles -> %s", len(preds), args.out)
    print(str(manifest))
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sar2rgb", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, seed=True):
        p.add_argument("--config", help="JSON pipeline config; flags override its values")
        if seed:
            p.add_argument("--seed", type=int, help="RNG seed (default: config, then "
                                                    "SAR2RGB_SEED, then 0)")

    p = sub.add_parser("synth", help="generate a synthetic paired fixture corpus")
    common(p)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--n-pairs", type=int, required=True)
    p.add_argument("--size", type=int, default=64, help="tile edge, power of two >= 16")
    p.add_argument("--cloud-fraction", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="convert external rasters into tiles + pairs manifest")
    common(p, seed=False)
    p.add_argument("--in", dest="in_path", required=True,
                   help="directory of <tile_id>_<s1|s2|qa60>.<ext> rasters")
    p.add_argument("--out", required=True, help="output tile directory")
    p.add_argument("--s2-scale", type=float, default=0.0,
                   help="divide optical DNs by this scale into [0,1] (0 = keep raw values)")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("screen", help="compute nodata/cloud statistics per optical tile")
    common(p, seed=False)
    p.add_argument("--in", dest="in_path", required=True,
                   help="tile directory or pairs manifest")
    p.add_argument("--out", required=True, help="output screen.jsonl")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--brightness-threshold", type=float)
    p.set_defaults(func=_cmd_screen)

    p = sub.add_parser("filter", help="filter a pairs manifest by screening ratios")
    common(p, seed=False)
    p.add_argument("--in", dest="in_path", required=True, help="pairs manifest")
    p.add_argument("--screen", help="screen.jsonl to attach (else reports must be embedded)")
    p.add_argument("--preset", choices=sorted(curation.FILTER_PRESETS),
                   help="named filter preset")
    p.add_argument("--max-nodata", type=float, default=0.0)
    p.add_argument("--max-qa60", type=float, default=None)
    p.add_argument("--max-heuristic", type=float, default=None)
    p.add_argument("--out", required=True, help="filtered pairs manifest")
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("split", help="split a manifest into train and holdout")
    common(p)
    p.add_argument("--in", dest="in_path", required=True, help="pairs manifest")
    p.add_argument("--n", type=int, required=True, help="holdout size")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-eval", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a generator on a pairs manifest")
    common(p)
    p.add_argument("--in", dest="in_path", required=True, help="training pairs manifest")
    p.add_argument("--eval", help="holdout pairs manifest for periodic metrics")
    p.add_argument("--out", required=True, help="output checkpoint (.s2ck)")
    p.add_argument("--trace", help="output loss trace (.jsonl)")
    p.add_argument("--variant", choices=[v.value for v in trainer.Variant])
    p.add_argument("--image-size", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--gan-weight", type=float)
    p.add_argument("--l1-weight", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic kernels (bit-exact reruns)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="translate SAR tiles with a checkpoint")
    common(p, seed=False)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="in_path", required=True,
                   help="pairs manifest or directory of SAR tiles")
    p.add_argument("--out", required=True, help="output prediction directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="MAE/PSNR of predictions against references")
    common(p, seed=False)
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--in", dest="in_path", required=True, help="reference pairs manifest")
    p.add_argument("--out", required=True, help="output metrics report (.json)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ensemble", help="combine several prediction sets")
    common(p, seed=False)
    p.add_argument("--in", dest="in_path", nargs="+",
                   help="member prediction directories")
    p.add_argument("--mode", choices=[m.value for m in evalkit.EnsembleMode])
    p.add_argument("--assign", help="JSON map pair_id -> member name (assign mode)")
    p.add_argument("--out", required=True, help="output directory for combined tiles")
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("package", help="package predictions into a submission directory")
    common(p, seed=False)
    p.add_argument("--in", dest="in_path", required=True, help="prediction directory")
    p.add_argument("--out", required=True, help="submission directory")
    p.set_defaults(func=_cmd_package)

    return parser


def run(argv: list[str]) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help prints and exits 0
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.NonFiniteLossError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except (ValueError, KeyError, OSError, TileFormatError, trainer.CheckpointError,
            json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception as exc:  # unexpected failure
        log.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
