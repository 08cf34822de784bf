"""Sweeps and behavioural probes of a trained denoiser on the family benchmark."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .benchmark import (
    FamilyBenchmark,
    LocalizedQuery,
    MaskedPairs,
    contains_word,
    instruction_consistency,
    reference_similarity,
)
from .diffusion import caption_arrays
from .guidance import GuidanceSpec, compose_batch
from .retrieval import RetrievalIndex, build_index, positives_for, score_rankings, search_batch
from .toyworld import N_CELLS, ParsedInstruction, Scene, TextTokens, ToyWorld

AXES = ("steps", "w_I", "w_T")
_AXIS_FIELD = {"steps": "n_steps", "w_I": "w_I", "w_T": "w_T"}


def query_arrays(world: ToyWorld, triplets):
    refs = np.stack([t.ref_embedding for t in triplets])
    instr = np.stack([world.token_array(t.instruction) for t in triplets])
    masks = np.stack([t.mask.as_array() for t in triplets])
    return refs, instr, masks


def scene_lookup(world: ToyWorld, corpus) -> dict[int, Scene]:
    return {s.scene_id(world.config): s for s, _ in corpus}


def evaluate_point(model, world: ToyWorld, bench: FamilyBenchmark, index: RetrievalIndex, spec: GuidanceSpec,
                   repeats: int = 1) -> dict:
    """Metrics for one guidance setting plus instruction consistency, reference
    similarity and the wall-clock time per query (minimum over `repeats`)."""
    refs, instr, masks = query_arrays(world, bench.queries)
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        queries = compose_batch(model, world, refs, instr, masks, spec)
        best = min(best, time.perf_counter() - t0)
    positives = positives_for(world, index, [t.target_scene for t in bench.queries])
    res = score_rankings(index, queries, positives)
    lookup = scene_lookup(world, bench.corpus)
    top = [[lookup[int(i)] for i in ids] for ids in res.top_ids]
    row = {"w_I": spec.w_I, "w_T": spec.w_T, "n_steps": spec.n_steps, "seed": spec.seed}
    row.update(res.as_row())
    row["instruction_consistency"] = instruction_consistency(world, top, [t.target_word for t in bench.queries])
    row["reference_similarity"] = reference_similarity(index, res.top_ids, refs)
    row["seconds_per_query"] = best / len(refs)
    return row


def sweep(model, world: ToyWorld, bench: FamilyBenchmark, index: RetrievalIndex, base: GuidanceSpec,
          axis: str, grid, repeats: int = 1) -> list[dict]:
    """One row per grid value of `axis`; everything else, seeds included, is held fixed."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    rows = []
    for value in grid:
        value = int(value) if axis == "steps" else float(value)
        spec = dataclasses.replace(base, **{_AXIS_FIELD[axis]: value})
        rows.append({"axis": axis, "value": value, **evaluate_point(model, world, bench, index, spec, repeats)})
    return rows


def negative_text_effect(model, world: ToyWorld, bench: FamilyBenchmark, index: RetrievalIndex,
                         spec: GuidanceSpec) -> dict:
    """Occurrence of each query's source word in its top 10, with and without
    that word as negative text."""
    refs, instr, masks = query_arrays(world, bench.queries)
    words = [t.source_word for t in bench.queries]
    neg = np.stack([world.token_array(TextTokens((world.token_id[w],))) for w in words])
    lookup = scene_lookup(world, bench.corpus)
    rates = {}
    for name, negatives in (("without", None), ("with", neg)):
        q = compose_batch(model, world, refs, instr, masks, spec, negatives=negatives)
        top = search_batch(index, q, 10)
        rates[name] = float(np.mean([
            np.mean([contains_word(world, lookup[int(i)], w) for i in ids]) for ids, w in zip(top, words)
        ]))
    return {"rate_without": rates["without"], "rate_with": rates["with"], "n_queries": len(words)}


def _cos_rows(a, b):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return (a * b).sum(axis=1)


def mask_conversion(model, world: ToyWorld, pairs: MaskedPairs, spec: GuidanceSpec) -> dict:
    """Recover clean embeddings from masked renders plus the full caption."""
    captions = caption_arrays(world, pairs.scenes)
    out = compose_batch(model, world, pairs.masked, captions, pairs.masks, spec)
    return {
        "cos_output": float(_cos_rows(out, pairs.clean).mean()),
        "cos_masked": float(_cos_rows(pairs.masked, pairs.clean).mean()),
        "n_pairs": len(pairs.scenes),
    }


def localized_candidates(world: ToyWorld, q: LocalizedQuery) -> list[Scene]:
    """Every single-cell edit of the reference plus the edit of all matching cells."""
    t = q.triplet
    v = world.vocab
    slot = 0 if v.kind_of[t.source_word] == "object" else 1
    idx = v.index_of(t.source_word)
    cells = [p for p in range(N_CELLS) if t.ref_scene.cells[p][slot] == idx]
    out = [world.apply_instruction(t.ref_scene, ParsedInstruction(t.source_word, t.target_word, p)) for p in cells]
    return out + [q.global_target]


def localized_edit_rates(model, world: ToyWorld, queries: list[LocalizedQuery], spec: GuidanceSpec,
                         seed: int = 0) -> dict:
    """Top-1 rate of the exact single-cell edit, querying with and without the cell mask.

    The index holds, for every query, all its single-cell edits and its global
    edit, each rendered once.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    scenes = {}
    for q in queries:
        for s in localized_candidates(world, q):
            scenes.setdefault(s.scene_id(world.config), s)
    ids = sorted(scenes)
    vecs = np.stack([world.render_image(scenes[i], int(rng.integers(2**63 - 1))) for i in ids])
    index = build_index(ids, vecs)
    trips = [q.triplet for q in queries]
    refs, instr, masks = query_arrays(world, trips)
    want = np.array([t.target_scene.scene_id(world.config) for t in trips])
    rates = {}
    for name, m in (("masked", masks), ("unmasked", np.zeros_like(masks))):
        top = search_batch(index, compose_batch(model, world, refs, instr, m, spec), 1)[:, 0]
        rates[name] = float(np.mean(top == want))
    return {"rate_masked": rates["masked"], "rate_unmasked": rates["unmasked"], "n_queries": len(trips)}
