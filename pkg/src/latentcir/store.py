"""Dataset and checkpoint files built on the record format in `recordio`."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .denoiser import EMA, Denoiser, DenoiserConfig
from .forge import CIRTriplet
from .recordio import read_records, read_tensors, write_records, write_tensors
from .toyworld import N_CELLS, RegionMask, Scene, TextTokens, ToyWorld, WorldConfig

FORMAT_VERSION = 1


def _world_header(world: ToyWorld, kind: str, **extra) -> dict:
    from dataclasses import asdict

    return {"kind": kind, "version": FORMAT_VERSION, "world": asdict(world.config), **extra}


def check_world(header: dict, world: ToyWorld, path):
    if WorldConfig(**header["world"]) != world.config:
        raise ValueError(f"{path}: written for a different world configuration")


# ---- vocab ----------------------------------------------------------------


def write_vocab(path, world: ToyWorld):
    v = world.vocab
    words = v.words()
    dim = world.config.embed_dim
    write_records(
        path,
        _world_header(world, "vocab", words=words),
        [("kind", "u1", ()), ("cluster", "<i2", ()), ("embedding", "<f4", (dim,))],
        {
            "kind": np.array([("object", "color", "style").index(v.kind_of[w]) for w in words]),
            "cluster": np.array([v.cluster_of[w] for w in words]),
            "embedding": v.matrix(),
        },
    )


# ---- corpus ---------------------------------------------------------------


def write_corpus(path, world: ToyWorld, corpus, **extra):
    dim = world.config.embed_dim
    write_records(
        path,
        _world_header(world, "corpus", **extra),
        [("scene_id", "<i8", ()), ("scene", "<i2", (2 * N_CELLS + 1,)), ("embedding", "<f4", (dim,))],
        {
            "scene_id": np.array([s.scene_id(world.config) for s, _ in corpus], dtype=np.int64),
            "scene": np.array([s.as_array() for s, _ in corpus]).reshape(len(corpus), 2 * N_CELLS + 1),
            "embedding": np.array([e for _, e in corpus]).reshape(len(corpus), dim),
        },
    )


def read_corpus(path, world: ToyWorld) -> list[tuple[Scene, np.ndarray]]:
    header, rec = read_records(path)
    check_world(header, world, path)
    return [(Scene.from_array(r["scene"]), r["embedding"].astype(np.float64)) for r in rec]


# ---- triplets ---------------------------------------------------------------


def _triplet_fields(world: ToyWorld):
    dim, L = world.config.embed_dim, world.config.text_len
    return [
        ("ref_scene", "<i2", (2 * N_CELLS + 1,)),
        ("target_scene", "<i2", (2 * N_CELLS + 1,)),
        ("tokens", "<i4", (L,)),
        ("mask", "u1", ()),
        ("source_word", "<i2", ()),
        ("target_word", "<i2", ()),
        ("template_id", "<i2", ()),
        ("ref_embedding", "<f4", (dim,)),
        ("target_embedding", "<f4", (dim,)),
    ]


def write_triplets(path, world: ToyWorld, triplets, **extra):
    words = world.vocab.words()
    n = len(triplets)
    dim, L = world.config.embed_dim, world.config.text_len
    cols = {
        "ref_scene": np.array([t.ref_scene.as_array() for t in triplets]).reshape(n, 2 * N_CELLS + 1),
        "target_scene": np.array([t.target_scene.as_array() for t in triplets]).reshape(n, 2 * N_CELLS + 1),
        "tokens": np.array([world.token_array(t.instruction) for t in triplets]).reshape(n, L),
        "mask": np.array([t.mask.to_int() for t in triplets]),
        "source_word": np.array([words.index(t.source_word) if t.source_word else -1 for t in triplets]),
        "target_word": np.array([words.index(t.target_word) if t.target_word else -1 for t in triplets]),
        "template_id": np.array([t.template_id for t in triplets]),
        "ref_embedding": np.array([t.ref_embedding for t in triplets]).reshape(n, dim),
        "target_embedding": np.array([t.target_embedding for t in triplets]).reshape(n, dim),
    }
    write_records(path, _world_header(world, "triplets", **extra), _triplet_fields(world), cols)


def read_triplets(path, world: ToyWorld) -> list[CIRTriplet]:
    header, rec = read_records(path)
    check_world(header, world, path)
    words = world.vocab.words()
    out = []
    for r in rec:
        ids = tuple(int(x) for x in r["tokens"] if x >= 0)
        if ids == (world.token_id[""],):
            ids = ()
        out.append(CIRTriplet(
            ref_embedding=r["ref_embedding"].astype(np.float64),
            instruction=TextTokens(ids),
            target_embedding=r["target_embedding"].astype(np.float64),
            ref_scene=Scene.from_array(r["ref_scene"]),
            target_scene=Scene.from_array(r["target_scene"]),
            mask=RegionMask.from_int(int(r["mask"])),
            source_word=words[r["source_word"]] if r["source_word"] >= 0 else None,
            target_word=words[r["target_word"]] if r["target_word"] >= 0 else None,
            template_id=int(r["template_id"]),
        ))
    return out


def shard_paths(directory) -> list[Path]:
    return sorted(Path(directory).glob("triplets_*.rec"))


def read_shards(directory, world: ToyWorld) -> list[CIRTriplet]:
    out = []
    for p in shard_paths(directory):
        out.extend(read_triplets(p, world))
    return out


# ---- checkpoints ---------------------------------------------------------------


def write_checkpoint(path, model: Denoiser, ema: EMA, optimizer: torch.optim.Optimizer | None, header: dict):
    """Parameters, EMA shadow and Adam moments as float32 tensors in declared order."""
    names = [n for n, _ in model.named_parameters()]
    state = model.state_dict()
    tensors = [("param/" + n, state[n].detach().cpu().numpy()) for n in state]
    tensors += [("ema/" + n, ema.shadow[n].cpu().numpy()) for n in state]
    adam_steps = {}
    if optimizer is not None:
        params = dict(model.named_parameters())
        for n in names:
            st = optimizer.state.get(params[n])
            if not st:
                continue
            tensors.append(("adam_m/" + n, st["exp_avg"].cpu().numpy()))
            tensors.append(("adam_v/" + n, st["exp_avg_sq"].cpu().numpy()))
            adam_steps[n] = int(st["step"].item())
    from dataclasses import asdict

    head = dict(header, kind="checkpoint", version=FORMAT_VERSION, denoiser=asdict(model.cfg),
                ema_decay=ema.decay, adam_steps=adam_steps)
    write_tensors(path, head, tensors)


def read_checkpoint(path) -> tuple[dict, dict]:
    header, tensors = read_tensors(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    return header, tensors


def load_model(path, which: str = "ema") -> tuple[Denoiser, dict]:
    """Rebuild a denoiser from a checkpoint using the EMA ("ema") or raw ("param") weights."""
    header, tensors = read_checkpoint(path)
    model = Denoiser(DenoiserConfig(**header["denoiser"]))
    sd = {k.split("/", 1)[1]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(which + "/")}
    model.load_state_dict(sd)
    model.eval()
    return model, header


def restore_training_state(path, model: Denoiser, ema: EMA, optimizer: torch.optim.Optimizer) -> dict:
    """Load parameters, EMA and Adam state in place; returns the header."""
    header, tensors = read_checkpoint(path)
    if DenoiserConfig(**header["denoiser"]) != model.cfg:
        raise ValueError(f"{path}: denoiser configuration mismatch")
    get = lambda k: torch.from_numpy(tensors[k])
    model.load_state_dict({n: get("param/" + n) for n in model.state_dict()})
    ema.shadow = {n: get("ema/" + n).clone() for n in model.state_dict()}
    params = dict(model.named_parameters())
    optimizer.state.clear()
    for n, steps in header["adam_steps"].items():
        p = params[n]
        optimizer.state[p] = {
            "step": torch.tensor(float(steps)),
            "exp_avg": get("adam_m/" + n).clone(),
            "exp_avg_sq": get("adam_v/" + n).clone(),
        }
    return header
