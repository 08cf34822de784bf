"""Evaluation query sets with exact ground truth in a given corpus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import templates
from .forge import CIRTriplet, eligible_replacements, extract_keywords, instantiate_template, triplet_rng
from .toyworld import N_CELLS, ParsedInstruction, RegionMask, Scene, ToyWorld

BOTH_TEMPLATES = tuple(i for i in range(templates.N_TEMPLATES) if templates.template_class(i) == "both")


def _fresh_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**63 - 1))


@dataclass
class MaskedPairs:
    scenes: np.ndarray  # (n, 9)
    masks: np.ndarray  # (n, 4)
    clean: np.ndarray  # (n, dim)
    masked: np.ndarray  # (n, dim)


def make_masked_pairs(world: ToyWorld, n: int, seed: int) -> MaskedPairs:
    """Held-out masked-conversion pairs: fresh scenes, one or two masked cells."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    dim = world.config.embed_dim
    scenes = world.random_scenes(rng, n)
    masks = np.zeros((n, N_CELLS))
    for row in masks:
        row[rng.choice(N_CELLS, size=int(rng.integers(1, 3)), replace=False)] = 1.0
    eta = rng.standard_normal((n, dim))
    clean = world.render_batch(scenes, eta)
    masked = world.render_batch(scenes, eta, masks, rng.standard_normal((n, N_CELLS, dim)))
    return MaskedPairs(scenes, masks, clean, masked)


@dataclass
class LocalizedQuery:
    triplet: CIRTriplet  # masked triplet whose target changes one cell only
    global_target: Scene  # the same edit applied to every matching cell


def make_localized_queries(world: ToyWorld, n: int, seed: int) -> list[LocalizedQuery]:
    """References holding the source attribute in two or more cells; the masked
    target edits one of them, the global target edits all."""
    v = world.vocab
    out = []
    for i in range(n):
        rng = triplet_rng(seed, 10_000_000 + i)
        base = world.random_scene(rng)
        kind = ("object", "color")[int(rng.integers(2))]
        slot = 0 if kind == "object" else 1
        words = v.object_words if kind == "object" else v.color_words
        src = words[int(rng.integers(len(words)))]
        idx = words.index(src)
        cells = [list(c) for c in base.cells]
        k = int(rng.integers(2, N_CELLS + 1))
        chosen = rng.choice(N_CELLS, size=k, replace=False)
        for p in range(N_CELLS):
            if p in chosen:
                cells[p][slot] = idx
            elif cells[p][slot] == idx:
                cells[p][slot] = (idx + 1) % len(words)
        ref = Scene(tuple(tuple(c) for c in cells), base.style)
        tgt_word = eligible_replacements(src, v)[int(rng.integers(len(eligible_replacements(src, v))))]
        region = int(chosen[int(rng.integers(k))])
        local = world.apply_instruction(ref, ParsedInstruction(src, tgt_word, region))
        glob = world.apply_instruction(ref, ParsedInstruction(src, tgt_word))
        tid = BOTH_TEMPLATES[int(rng.integers(len(BOTH_TEMPLATES)))]
        instr = instantiate_template(world, src, tgt_word, tid)
        ref_emb = world.render_image(ref, _fresh_seed(rng))
        tgt_emb = world.render_image(local, _fresh_seed(rng))
        trip = CIRTriplet(ref_emb, instr, tgt_emb, ref, local, RegionMask.cell(region), src, tgt_word, tid)
        out.append(LocalizedQuery(trip, glob))
    return out


def contains_word(world: ToyWorld, scene: Scene, word: str) -> bool:
    v = world.vocab
    kind, idx = v.kind_of[word], v.index_of(word)
    if kind == "style":
        return scene.style == idx
    slot = 0 if kind == "object" else 1
    return any(c[slot] == idx for c in scene.cells)


def instruction_consistency(world: ToyWorld, top_scenes, target_words) -> float:
    """Mean fraction of retrieved scenes that contain the instructed target word."""
    return float(np.mean([
        np.mean([contains_word(world, s, word) for s in scenes]) for scenes, word in zip(top_scenes, target_words)
    ]))


def reference_similarity(index, top_ids, refs: np.ndarray) -> float:
    """Mean cosine between each reference embedding and its retrieved embeddings."""
    vals = []
    for ids, ref in zip(top_ids, refs):
        rows = index.matrix[[index.position_of(int(i)) for i in ids]]
        vals.append(float((rows @ ref).mean()))
    return float(np.mean(vals))


@dataclass
class FamilyBenchmark:
    """Retrieval corpus of single-edit siblings and one query per corpus item."""

    corpus: list  # [(Scene, embedding)]
    queries: list[CIRTriplet]
    bases: list[Scene]  # reference scene of each family; never in the corpus


def single_edits(world: ToyWorld, scene: Scene) -> list[tuple[str, str]]:
    """Every (source, target) word swap where the target word is absent from the scene."""
    words = extract_keywords(world, world.caption_of(scene))
    present = set(words)
    return [(s, t) for s in words for t in eligible_replacements(s, world.vocab) if t not in present]


def make_family_benchmark(world: ToyWorld, n_families: int, family_size: int, seed: int) -> FamilyBenchmark:
    """Hard-negative benchmark.

    Each family is a base scene and `family_size` distinct scenes one word swap
    away from it.  Siblings share everything but the edit, so the right target
    can only be told apart from its siblings by following the instruction.
    The query for each sibling is the base scene (fresh noise) plus the swap
    instruction; bases are never corpus items.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    taken: set[Scene] = set()
    bases: list[Scene] = []
    corpus, queries = [], []
    tries = 0
    while len(bases) < n_families:
        tries += 1
        if tries > 100 * n_families + 100:
            raise RuntimeError("could not build enough families")
        base = world.random_scene(rng)
        if base in taken:
            continue
        edits = {}
        for s, t in single_edits(world, base):
            tgt = world.apply_instruction(base, ParsedInstruction(s, t))
            if tgt not in taken and tgt != base:
                edits.setdefault(tgt, (s, t))
        if len(edits) < family_size:
            continue
        members = list(edits.items())
        pick = rng.choice(len(members), size=family_size, replace=False)
        bases.append(base)
        taken.add(base)
        for j in sorted(pick):
            tgt, (s, t) = members[int(j)]
            taken.add(tgt)
            corpus.append((tgt, world.render_image(tgt, _fresh_seed(rng))))
            tid = BOTH_TEMPLATES[int(rng.integers(len(BOTH_TEMPLATES)))]
            instr = instantiate_template(world, s, t, tid)
            ref_emb = world.render_image(base, _fresh_seed(rng))
            queries.append(CIRTriplet(ref_emb, instr, corpus[-1][1], base, tgt, RegionMask(), s, t, tid))
    return FamilyBenchmark(corpus, queries, bases)
