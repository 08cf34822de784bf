"""Command line: forge-data, train, evaluate, sweep.

Every command takes --config PATH --seed INT --out DIR.  Failures exit with
status 2 and print one JSON line {"error": ..., "message": ...} on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .analysis import AXES, evaluate_point, sweep
from .benchmark import FamilyBenchmark, make_family_benchmark
from .denoiser import init_params
from .diffusion import Trainer, TrainingData, TrainingDiverged, TripletArrays
from .forge import dataset_stats, forge_triplets
from .guidance import GuidanceSpec, spec_to_record
from .recordio import file_digest
from .retrieval import index_from_corpus
from .store import (
    load_model,
    read_corpus,
    read_shards,
    read_triplets,
    restore_training_state,
    shard_paths,
    write_checkpoint,
    write_corpus,
    write_triplets,
    write_vocab,
)
from .toyworld import ToyWorld

log = logging.getLogger("latentcir")


class CommandError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(f"usage: {message}")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_rows(out: Path, stem: str, rows: list[dict]):
    if rows:
        with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    with open(out / f"{stem}.jsonl", "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _setup(args) -> tuple[config_mod.RunConfig, Path]:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    cfg = cfg.with_seed(args.seed)
    if cfg.denoiser.n_timesteps != cfg.train.n_timesteps:
        raise CommandError("[denoiser] and [train] n_timesteps differ")
    if cfg.denoiser.embed_dim != cfg.world.embed_dim or cfg.denoiser.text_len != cfg.world.text_len:
        raise CommandError("[denoiser] embed_dim/text_len must match [world]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "config.ini")
    return cfg, out


def _manifest(out: Path, cfg, command: str, files, **extra):
    _write_json(out / "manifest.json", {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "world_seed": cfg.world.seed,
        "files": {Path(p).name: file_digest([p]) for p in files},
        **extra,
    })


def dataset_hash(data: Path) -> str:
    return file_digest(shard_paths(data) + [data / "corpus.rec", data / "queries.rec"])


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---- forge-data ----------------------------------------------------------------


def cmd_forge(args) -> int:
    cfg, out = _setup(args)
    fc = cfg.forge
    world = ToyWorld(cfg.world)
    n = fc.n_triplets if args.n_triplets is None else args.n_triplets
    if n < 0:
        raise CommandError("n_triplets must be >= 0")
    if n == 0:
        kept, n_cand, passes = [], 0, None
    else:
        res = forge_triplets(world, cfg.seed, fc.thresholds, n_candidates=fc.max_candidates or None,
                             n_keep=n, mask_prob=fc.mask_prob)
        kept, n_cand, passes = res.kept, res.n_candidates, res.check_passes
    for old in shard_paths(out):
        old.unlink()
    header = {"seed": cfg.seed, "thresholds": dataclasses.asdict(fc.thresholds), "n_candidates": n_cand}
    files = [out / "vocab.rec"]
    write_vocab(files[0], world)
    n_shards = max(1, math.ceil(len(kept) / fc.shard_size))
    for k in range(n_shards):
        part = kept[k * fc.shard_size:(k + 1) * fc.shard_size]
        p = out / f"triplets_{k:05d}.rec"
        write_triplets(p, world, part, shard=k, n_shards=n_shards, total=len(kept), **header)
        files.append(p)

    ec = cfg.eval
    bench = make_family_benchmark(world, ec.n_families, ec.family_size, cfg.seed)
    write_corpus(out / "corpus.rec", world, bench.corpus, seed=cfg.seed)
    write_triplets(out / "queries.rec", world, bench.queries, seed=cfg.seed)
    files += [out / "corpus.rec", out / "queries.rec"]

    stats = dataset_stats(kept, n_cand, passes)
    _write_json(out / "stats.json", stats)
    files.append(out / "stats.json")
    _manifest(out, cfg, "forge-data", files, dataset_hash=dataset_hash(out))
    print(json.dumps({"n_triplets": len(kept), "n_candidates": n_cand, "pass_rate": stats.get("pass_rate", 0.0)}))
    return 0


# ---- train ---------------------------------------------------------------------


def _trace_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True) + "\n"


def _save(out: Path, trainer: Trainer, cfg, name: str) -> Path:
    path = out / name
    write_checkpoint(path, trainer.model, trainer.ema, trainer.optimizer,
                     {"step": trainer.step, "seed": trainer.seed, "config_hash": cfg.hash()})
    return path


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    torch.set_num_threads(1)
    world = ToyWorld(cfg.world)
    data_dir = Path(args.data)
    if not shard_paths(data_dir):
        raise CommandError(f"no triplet shards in {data_dir}")
    trips = read_shards(data_dir, world)
    if not trips and cfg.train.stage2_steps and cfg.train.task_mix[2] > 0:
        raise CommandError("stage 2 needs triplets but the dataset is empty")
    data = TrainingData(world, TripletArrays.from_triplets(world, trips))
    model = init_params(cfg.denoiser, cfg.seed)
    trainer = Trainer(model, world, data, cfg.train, cfg.seed)

    trace_path = out / "trace.jsonl"
    kept_lines: list[str] = []
    if args.resume:
        header = restore_training_state(args.resume, model, trainer.ema, trainer.optimizer)
        if header.get("seed") != cfg.seed:
            raise CommandError(f"checkpoint seed {header.get('seed')} differs from run seed {cfg.seed}")
        trainer.step = int(header["step"])
        if trace_path.exists():
            for line in trace_path.read_text(encoding="utf-8").splitlines(keepends=True):
                if json.loads(line)["step"] < trainer.step:
                    kept_lines.append(line)
        if len(kept_lines) != trainer.step:
            raise CommandError(f"trace in {out} does not cover the {trainer.step} checkpointed steps")
        log.info("resumed from %s at step %d", args.resume, trainer.step)

    every = cfg.train.checkpoint_every
    last_good = Path(args.resume) if args.resume else None
    with open(trace_path, "w", encoding="utf-8") as trace:
        trace.writelines(kept_lines)

        def on_step(tr, rec):
            nonlocal last_good
            trace.write(_trace_line(rec))
            if every and tr.step % every == 0:
                trace.flush()
                last_good = _save(out, tr, cfg, f"ckpt_{tr.step:07d}.rec")

        try:
            trainer.run(until=args.until, on_step=on_step)
        except TrainingDiverged as e:
            trace.flush()
            raise CommandError(f"{e}; last good checkpoint: {last_good or 'none'}") from None
    final = _save(out, trainer, cfg, "checkpoint.rec")
    _manifest(out, cfg, "train", [final, trace_path], step=trainer.step, dataset_hash=dataset_hash(data_dir),
              checkpoint_id=checkpoint_id(final))
    print(json.dumps({"step": trainer.step, "checkpoint": str(final)}))
    return 0


# ---- evaluate / sweep -------------------------------------------------------------


def _load_bench(data: Path, world: ToyWorld) -> FamilyBenchmark:
    corpus = read_corpus(data / "corpus.rec", world)
    queries = read_triplets(data / "queries.rec", world)
    return FamilyBenchmark(corpus, queries, sorted({q.ref_scene for q in queries}, key=lambda s: s.scene_id(world.config)))


def _spec(cfg, args) -> GuidanceSpec:
    g = cfg.guidance
    return GuidanceSpec(
        w_I=g.w_I if args.w_I is None else args.w_I,
        w_T=g.w_T if args.w_T is None else args.w_T,
        n_steps=g.n_steps if args.steps is None else args.steps,
        seed=cfg.seed,
        clip_norm=g.clip_norm,
    )


def _eval_inputs(args):
    cfg, out = _setup(args)
    torch.set_num_threads(1)
    world = ToyWorld(cfg.world)
    data = Path(args.data)
    bench = _load_bench(data, world)
    model, _ = load_model(args.checkpoint)
    return cfg, out, world, data, bench, index_from_corpus(world, bench.corpus), model


def cmd_evaluate(args) -> int:
    cfg, out, world, data, bench, index, model = _eval_inputs(args)
    spec = _spec(cfg, args)
    row = evaluate_point(model, world, bench, index, spec)
    row.pop("seconds_per_query")
    _write_rows(out, "metrics", [row])
    (out / "query.txt").write_text(spec_to_record(spec), encoding="utf-8")
    _manifest(out, cfg, "evaluate", [out / "metrics.csv", out / "metrics.jsonl", out / "query.txt"],
              dataset_hash=dataset_hash(data), checkpoint_id=checkpoint_id(args.checkpoint),
              guidance=dataclasses.asdict(spec))
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg, out, world, data, bench, index, model = _eval_inputs(args)
    grid = {"steps": cfg.eval.steps_grid, "w_I": cfg.eval.w_I_grid, "w_T": cfg.eval.w_T_grid}[args.axis]
    rows = sweep(model, world, bench, index, _spec(cfg, args), args.axis, grid, repeats=args.repeats)
    _write_rows(out, f"sweep_{args.axis}", rows)
    _manifest(out, cfg, "sweep", [out / f"sweep_{args.axis}.csv"], axis=args.axis,
              dataset_hash=dataset_hash(data), checkpoint_id=checkpoint_id(args.checkpoint))
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return 0


# ---- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentcir", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="overrides [run] seed")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("forge-data", help="forge triplets, corpus and evaluation queries")
    common(sp)
    sp.add_argument("--n-triplets", type=int, help="overrides [forge] n_triplets")
    sp.set_defaults(func=cmd_forge)

    sp = sub.add_parser("train", help="two-stage training")
    common(sp)
    sp.add_argument("--data", required=True, help="forge-data output directory")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--until", type=int, help="stop after this many total steps")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "retrieval metrics at one guidance setting"),
                                 ("sweep", cmd_sweep, "metrics over a grid of one guidance knob")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--w-I", dest="w_I", type=float)
        sp.add_argument("--w-T", dest="w_T", type=float)
        sp.add_argument("--steps", type=int)
        if name == "sweep":
            sp.add_argument("--axis", required=True, choices=AXES)
            sp.add_argument("--repeats", type=int, default=3, help="timing repeats per grid point")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except Exception as e:  # one machine-parseable line, nonzero exit
        kind = "usage" if isinstance(e, CommandError) and str(e).startswith("usage:") else type(e).__name__
        sys.stderr.write(json.dumps({"error": kind, "message": str(e)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
