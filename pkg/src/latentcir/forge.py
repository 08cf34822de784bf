"""Synthetic CIR triplet generation.

Caption triplets come from keyword replacement inside a similarity band plus a
randomly drawn instruction template; the toy world renders them into
(reference, instruction, target) embedding triplets, which are then kept or
dropped by similarity thresholds.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import templates
from .toyworld import (
    AttributeVocab,
    ParsedInstruction,
    RegionMask,
    Scene,
    TextTokens,
    ToyWorld,
)

BAND = (0.5, 0.7)


@dataclass(frozen=True)
class CaptionTriplet:
    ref_caption: TextTokens
    instruction: TextTokens
    target_caption: TextTokens
    source_word: str
    target_word: str
    template_id: int


@dataclass(frozen=True)
class CIRTriplet:
    ref_embedding: np.ndarray
    instruction: TextTokens
    target_embedding: np.ndarray
    ref_scene: Scene
    target_scene: Scene
    mask: RegionMask
    source_word: str
    target_word: str
    template_id: int

    def parsed(self) -> ParsedInstruction:
        """Ground-truth edit, including slots a target-only template leaves out."""
        return ParsedInstruction(self.source_word, self.target_word, self.mask.region, self.template_id)


@dataclass(frozen=True)
class FilterThresholds:
    img_img: float = 0.70
    img_caption: float = 0.2
    directional: float = 0.2
    keyword_img: float = 0.20

    def __post_init__(self):
        for name in ("img_img", "img_caption", "directional", "keyword_img"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"threshold {name} must lie in [-1, 1]")


def triplet_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for triplet `index`; no coupling across triplets."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def extract_keywords(world: ToyWorld, caption: TextTokens) -> list[str]:
    """Attribute words of a caption, each once, in order of appearance."""
    kinds = world.vocab.kind_of
    out: dict[str, None] = {}
    for i in caption.token_ids:
        w = world.tokens[i]
        if w in kinds:
            out.setdefault(w, None)
    return list(out)


def eligible_replacements(word: str, vocab: AttributeVocab, band=BAND) -> list[str]:
    e = vocab.word_embeddings[word]
    kind = vocab.kind_of[word]
    return [
        w for w in vocab.words()
        if w != word and vocab.kind_of[w] == kind and band[0] <= float(e @ vocab.word_embeddings[w]) <= band[1]
    ]


def propose_replacement(word: str, vocab: AttributeVocab, rng: np.random.Generator, band=BAND) -> str:
    """Uniform draw among words whose cosine with `word` lies in the band."""
    if word not in vocab.word_embeddings:
        raise KeyError(f"unknown word {word!r}")
    candidates = eligible_replacements(word, vocab, band)
    if not candidates:
        raise ValueError(f"no replacement for {word!r} within cosine band {band}")
    return candidates[int(rng.integers(len(candidates)))]


def instantiate_template(world: ToyWorld, source: str | None, target: str | None, template_id: int) -> TextTokens:
    return world.tokenize(templates.render_template(source, target, template_id))


def parse_instruction(world: ToyWorld, tokens: TextTokens) -> ParsedInstruction:
    """Token-level inverse of instantiate_template (first matching template wins)."""
    words = [world.tokens[i] for i in tokens.token_ids]
    kinds = world.vocab.kind_of
    for tid in range(templates.N_TEMPLATES):
        layout = templates.template_slots(tid)
        if len(layout) != len(words):
            continue
        slots = {}
        for want, got in zip(layout, words):
            if want in ("source", "target"):
                if got not in kinds:
                    break
                slots[want] = got
            elif want != got:
                break
        else:
            return ParsedInstruction(slots.get("source"), slots.get("target"), None, tid)
    raise ValueError(f"not an instruction: {' '.join(words)!r}")


def _substitute(world: ToyWorld, caption: TextTokens, source: str, target: str) -> TextTokens:
    s, t = world.token_id[source], world.token_id[target]
    return TextTokens(tuple(t if i == s else i for i in caption.token_ids))


def make_caption_triplet(world: ToyWorld, scene: Scene, rng: np.random.Generator) -> CaptionTriplet:
    ref = world.caption_of(scene)
    keywords = extract_keywords(world, ref)
    source = keywords[int(rng.integers(len(keywords)))]
    target = propose_replacement(source, world.vocab, rng)
    template_id = int(rng.integers(templates.N_TEMPLATES))
    return CaptionTriplet(
        ref_caption=ref,
        instruction=instantiate_template(world, source, target, template_id),
        target_caption=_substitute(world, ref, source, target),
        source_word=source,
        target_word=target,
        template_id=template_id,
    )


def generate_caption_triplets(world: ToyWorld, scenes, n: int, seed: int, start: int = 0) -> list[CaptionTriplet]:
    """n caption triplets; triplet i rewrites scenes[i % len(scenes)] using stream (seed, i)."""
    if n and not len(scenes):
        raise ValueError("scene pool is empty")
    out = []
    for i in range(start, start + n):
        out.append(make_caption_triplet(world, scenes[i % len(scenes)], triplet_rng(seed, i)))
    return out


def synthesize_cir_triplet(
    world: ToyWorld, ct: CaptionTriplet, rng: np.random.Generator, mask_prob: float = 0.0
) -> CIRTriplet:
    """Render a caption triplet.

    Reference and target share one instance-noise seed so the pair differs only
    by the edit.  With probability `mask_prob` a cell edit is localised to one
    cell that holds the source word, and the mask marks that cell.  If the
    reference holds the source word in one cell only, the word is first copied
    into a second cell so the localised edit differs from the global one.
    """
    ref_scene = world.parse_caption(ct.ref_caption)
    noise_seed = int(rng.integers(2**63 - 1))
    mask = RegionMask()
    kind = world.vocab.kind_of[ct.source_word]
    if mask_prob > 0 and kind != "style" and rng.random() < mask_prob:
        slot = 0 if kind == "object" else 1
        idx = world.vocab.index_of(ct.source_word)
        cells = [p for p, c in enumerate(ref_scene.cells) if c[slot] == idx]
        if len(cells) == 1:
            others = [p for p in range(len(ref_scene.cells)) if p != cells[0]]
            p = others[int(rng.integers(len(others)))]
            grid = [list(c) for c in ref_scene.cells]
            grid[p][slot] = idx
            ref_scene = Scene(tuple(tuple(c) for c in grid), ref_scene.style)
            cells = sorted(cells + [p])
        mask = RegionMask.cell(cells[int(rng.integers(len(cells)))])
    instr = ParsedInstruction(ct.source_word, ct.target_word, mask.region, ct.template_id)
    target_scene = world.apply_instruction(ref_scene, instr)
    if mask.empty and target_scene != world.parse_caption(ct.target_caption):
        raise ValueError("target caption does not describe the edited scene")
    eta = world.instance_noise(noise_seed)
    emb = world.render_batch(np.stack([ref_scene.as_array(), target_scene.as_array()]), np.stack([eta, eta]))
    return CIRTriplet(
        ref_embedding=emb[0],
        instruction=ct.instruction,
        target_embedding=emb[1],
        ref_scene=ref_scene,
        target_scene=target_scene,
        mask=mask,
        source_word=ct.source_word,
        target_word=ct.target_word,
        template_id=ct.template_id,
    )


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def filter_scores(world: ToyWorld, t: CIRTriplet) -> dict[str, float]:
    ref_txt = world.pooled_text(world.caption_of(t.ref_scene))
    tgt_txt = world.pooled_text(world.caption_of(t.target_scene))
    return {
        "img_img": _cos(t.ref_embedding, t.target_embedding),
        "img_caption_ref": _cos(t.ref_embedding, ref_txt),
        "img_caption_tgt": _cos(t.target_embedding, tgt_txt),
        "directional": _cos(t.target_embedding - t.ref_embedding, tgt_txt - ref_txt),
        "keyword_img": _cos(t.target_embedding, world.word_embedding(t.target_word)),
    }


def filter_triplet(world: ToyWorld, t: CIRTriplet, th: FilterThresholds) -> tuple[bool, dict]:
    """Keep iff every similarity clears its threshold; returns the per-check report."""
    s = filter_scores(world, t)
    checks = {
        "img_img": s["img_img"] >= th.img_img,
        "img_caption_ref": s["img_caption_ref"] >= th.img_caption,
        "img_caption_tgt": s["img_caption_tgt"] >= th.img_caption,
        "directional": s["directional"] >= th.directional,
        "keyword_img": s["keyword_img"] >= th.keyword_img,
    }
    return all(checks.values()), {"scores": s, "passed": checks}


@dataclass
class ForgeResult:
    kept: list[CIRTriplet]
    n_candidates: int
    check_passes: Counter = field(default_factory=Counter)

    @property
    def pass_rate(self) -> float:
        return len(self.kept) / self.n_candidates if self.n_candidates else 0.0


def forge_triplets(
    world: ToyWorld,
    seed: int,
    thresholds: FilterThresholds = FilterThresholds(),
    n_candidates: int | None = None,
    n_keep: int | None = None,
    mask_prob: float = 0.0,
) -> ForgeResult:
    """Generate and filter candidates until `n_keep` survive or `n_candidates` are spent.

    Candidate i draws a fresh reference scene and all its randomness from the
    stream (seed, i), so results do not depend on batching or on `n_keep`.
    """
    if n_candidates is None and n_keep is None:
        raise ValueError("give n_candidates, n_keep or both")
    result = ForgeResult(kept=[], n_candidates=0)
    i = 0
    while (n_candidates is None or i < n_candidates) and (n_keep is None or len(result.kept) < n_keep):
        rng = triplet_rng(seed, i)
        scene = world.random_scene(rng)
        ct = make_caption_triplet(world, scene, rng)
        t = synthesize_cir_triplet(world, ct, rng, mask_prob)
        ok, report = filter_triplet(world, t, thresholds)
        result.check_passes.update(k for k, v in report["passed"].items() if v)
        if ok:
            result.kept.append(t)
        i += 1
        result.n_candidates = i
    return result


def dataset_stats(triplets, n_candidates: int | None = None, check_passes=None) -> dict:
    """Instruction token-length histogram plus a pass-rate summary."""
    hist = Counter(len(t.instruction) for t in triplets)
    stats = {
        "n_triplets": len(triplets),
        "token_length_histogram": {int(k): hist[k] for k in sorted(hist)},
        "template_classes": dict(sorted(Counter(templates.template_class(t.template_id) for t in triplets).items())),
        "masked": sum(1 for t in triplets if not t.mask.empty),
    }
    if n_candidates is not None:
        stats["n_candidates"] = n_candidates
        stats["pass_rate"] = len(triplets) / n_candidates if n_candidates else 0.0
    if check_passes is not None:
        stats["check_pass_counts"] = dict(sorted(check_passes.items()))
    return stats
