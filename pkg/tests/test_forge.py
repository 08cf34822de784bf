from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcir import templates
from latentcir.forge import (
    BAND,
    CIRTriplet,
    FilterThresholds,
    dataset_stats,
    eligible_replacements,
    extract_keywords,
    filter_scores,
    filter_triplet,
    forge_triplets,
    generate_caption_triplets,
    instantiate_template,
    make_caption_triplet,
    parse_instruction,
    propose_replacement,
    synthesize_cir_triplet,
    triplet_rng,
)
from latentcir.toyworld import ParsedInstruction, RegionMask, Scene, ToyWorld, WorldConfig

_W = ToyWorld(WorldConfig())


# ---- templates ---------------------------------------------------------------------


def test_template_table():
    assert templates.N_TEMPLATES == 48
    classes = Counter(templates.template_class(i) for i in range(48))
    assert classes["both"] + classes["target"] + classes["source"] == 48
    assert templates.TEMPLATES.index("${target}") >= 0
    with pytest.raises(ValueError):
        templates.render_template("a", "b", 48)


def test_multiword_instantiation():
    tid = templates.TEMPLATES.index("convert ${source} to ${target}")
    text = templates.render_template("strawberry", "pak choi", tid)
    assert text == "convert strawberry to pak choi"
    src, tgt, found = templates.match_text(text)
    assert (src, tgt) == ("strawberry", "pak choi")
    assert templates.template_class(found) == "both"


def test_target_only_template(world):
    tid = templates.TEMPLATES.index("${target}")
    toks = instantiate_template(world, "red", "blue", tid)
    assert world.detokenize(toks) == "blue"


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 47), st.integers(0, 15), st.integers(0, 15))
def test_instantiate_parse_roundtrip(tid, a, b):
    w = _W
    src, tgt = w.vocab.object_words[a], w.vocab.object_words[b]
    toks = instantiate_template(w, src, tgt, tid)
    parsed = parse_instruction(w, toks)
    cls = templates.template_class(tid)
    assert templates.template_class(parsed.template_id) == cls
    if cls in ("both", "source"):
        assert parsed.source == src
    if cls in ("both", "target"):
        assert parsed.target == tgt
    # the parsed template re-renders to the same tokens
    assert instantiate_template(w, parsed.source, parsed.target, parsed.template_id) == toks


# ---- keywords and replacements ----------------------------------------------------------


def test_extract_keywords(world):
    v = world.vocab
    s = Scene(((3, 0), (7, 1), (3, 2), (7, 0)), 1)
    words = extract_keywords(world, world.caption_of(s))
    assert v.object_words[3] in words and v.object_words[7] in words
    assert words.count(v.object_words[3]) == 1
    assert set(words) == {v.object_words[3], v.object_words[7], v.color_words[0], v.color_words[1],
                          v.color_words[2], v.style_words[1]}
    assert not any(w in ("top-left", "top-right", "bottom-left", "bottom-right") for w in words)


def test_replacements_in_band_exhaustive(world):
    v = world.vocab
    for w in v.words():
        cands = eligible_replacements(w, v)
        assert cands and w not in cands
        for c in cands:
            assert BAND[0] <= v.cosine(w, c) <= BAND[1]
            assert v.cluster_of[c] == v.cluster_of[w]


def test_cluster_of_two_gives_other_member():
    w = ToyWorld(WorldConfig(n_colors=8, n_color_clusters=4))
    v = w.vocab
    rng = np.random.default_rng(0)
    for word in v.color_words:
        mates = [c for c in v.color_words if v.cluster_of[c] == v.cluster_of[word] and c != word]
        assert propose_replacement(word, v, rng) == mates[0]


def test_replacement_uniform(world):
    from scipy.stats import chisquare

    v = world.vocab
    word = v.object_words[0]
    cands = eligible_replacements(word, v)
    rng = np.random.default_rng(7)
    counts = Counter(propose_replacement(word, v, rng) for _ in range(10_000))
    assert set(counts) == set(cands)
    assert chisquare([counts[c] for c in cands]).pvalue > 0.01


# ---- caption triplets -------------------------------------------------------------------


def test_generate_caption_triplets(world):
    rng = np.random.default_rng(0)
    scenes = [world.random_scene(rng) for _ in range(50)]
    assert generate_caption_triplets(world, scenes, 0, seed=1) == []
    trips = generate_caption_triplets(world, scenes, 300, seed=1)
    v = world.vocab
    for i, ct in enumerate(trips):
        ref, tgt = ct.ref_caption.token_ids, ct.target_caption.token_ids
        s_id, t_id = world.token_id[ct.source_word], world.token_id[ct.target_word]
        assert ct.source_word in extract_keywords(world, ct.ref_caption)
        assert BAND[0] <= v.cosine(ct.source_word, ct.target_word) <= BAND[1]
        assert len(ref) == len(tgt)
        for a, b in zip(ref, tgt):
            assert b == (t_id if a == s_id else a)
        assert world.parse_caption(ct.ref_caption) == scenes[i % len(scenes)]
    assert trips == generate_caption_triplets(world, scenes, 300, seed=1)


def test_identity_triplet_differs_only_by_noise(world):
    s = world.random_scene(np.random.default_rng(2))
    word = extract_keywords(world, world.caption_of(s))[0]
    from latentcir.forge import CaptionTriplet

    cap = world.caption_of(s)
    ct = CaptionTriplet(cap, instantiate_template(world, word, word, 0), cap, word, word, 0)
    t = synthesize_cir_triplet(world, ct, np.random.default_rng(0))
    assert t.ref_scene == t.target_scene
    assert t.ref_embedding @ t.target_embedding > 1 - 1e-12


def test_one_word_change_closer_than_cross_scene(world):
    rng = np.random.default_rng(3)
    pair, cross = [], []
    for i in range(1000):
        r = triplet_rng(99, i)
        s = world.random_scene(r)
        t = synthesize_cir_triplet(world, make_caption_triplet(world, s, r), r)
        pair.append(t.ref_embedding @ t.target_embedding)
        other = world.render_image(world.random_scene(rng), i)
        cross.append(t.ref_embedding @ other)
    assert np.mean(pair) > np.mean(cross)


def test_synthesis_deterministic_and_consistent(world):
    for i in range(200):
        r1, r2 = triplet_rng(5, i), triplet_rng(5, i)
        s = world.random_scene(r1)
        assert s == world.random_scene(r2)
        a = synthesize_cir_triplet(world, make_caption_triplet(world, s, r1), r1, mask_prob=0.5)
        b = synthesize_cir_triplet(world, make_caption_triplet(world, s, r2), r2, mask_prob=0.5)
        np.testing.assert_array_equal(a.ref_embedding, b.ref_embedding)
        assert a.target_scene == b.target_scene
        assert world.apply_instruction(a.ref_scene, a.parsed()) == a.target_scene


def test_masked_edits_are_localised(world):
    n_masked = 0
    for i in range(300):
        r = triplet_rng(6, i)
        t = synthesize_cir_triplet(world, make_caption_triplet(world, world.random_scene(r), r), r, mask_prob=1.0)
        if t.mask.empty:
            continue
        n_masked += 1
        changed = [p for p in range(4) if t.ref_scene.cells[p] != t.target_scene.cells[p]]
        assert changed == [t.mask.region]
        whole = world.apply_instruction(t.ref_scene, ParsedInstruction(t.source_word, t.target_word))
        assert whole != t.target_scene
    assert n_masked > 100


# ---- filtering -------------------------------------------------------------------


def test_filter_trivial_cases(world):
    w0 = ToyWorld(WorldConfig(instance_noise_sigma=0.0))
    s = w0.random_scene(np.random.default_rng(0))
    e = w0.render_image(s, 0)
    word = extract_keywords(w0, w0.caption_of(s))[0]
    t = CIRTriplet(e, instantiate_template(w0, word, word, 0), e, s, s, RegionMask(), word, word, 0)
    ok, rep = filter_triplet(w0, t, FilterThresholds())
    assert rep["passed"]["img_img"] and abs(rep["scores"]["img_img"] - 1.0) < 1e-12
    ok, _ = filter_triplet(w0, t, FilterThresholds(-1, -1, -1, -1))
    assert ok


def test_filter_rejects_unrelated_pair(world):
    v = world.vocab
    # objects from different clusters, colors from different clusters, different styles
    a = Scene(((0, 0),) * 4, 0)
    b = Scene(((15, 7),) * 4, 3)
    ea, eb = world.render_image(a, 1), world.render_image(b, 1)
    assert ea @ eb < 0.70
    t = CIRTriplet(ea, world.tokenize(f"replace {v.object_words[0]} with {v.object_words[15]}"), eb, a, b,
                   RegionMask(), v.object_words[0], v.object_words[15], 0)
    ok, rep = filter_triplet(world, t, FilterThresholds())
    assert not ok and not rep["passed"]["img_img"]


def test_filter_soundness_on_10k(world):
    th = FilterThresholds()
    res = forge_triplets(world, seed=0, thresholds=th, n_candidates=10_000, mask_prob=0.25)
    assert 0 < res.pass_rate < 1
    for t in res.kept:
        s = filter_scores(world, t)
        assert s["img_img"] >= th.img_img
        assert s["img_caption_ref"] >= th.img_caption and s["img_caption_tgt"] >= th.img_caption
        assert s["directional"] >= th.directional
        assert s["keyword_img"] >= th.keyword_img
        assert world.apply_instruction(t.ref_scene, t.parsed()) == t.target_scene


def test_forge_prefix_stable(world):
    a = forge_triplets(world, seed=3, n_candidates=300)
    b = forge_triplets(world, seed=3, n_keep=len(a.kept) // 2)
    assert [t.target_scene for t in b.kept] == [t.target_scene for t in a.kept[: len(b.kept)]]
    with pytest.raises(ValueError):
        forge_triplets(world, seed=3)


# ---- stats ------------------------------------------------------------------------


def test_dataset_stats(world):
    empty = dataset_stats([])
    assert empty["token_length_histogram"] == {} and empty["n_triplets"] == 0
    res = forge_triplets(world, seed=0, n_candidates=200)
    one = dataset_stats(res.kept[:1])
    assert one["token_length_histogram"] == {len(res.kept[0].instruction): 1}
    stats = dataset_stats(res.kept, res.n_candidates, res.check_passes)
    assert sum(stats["token_length_histogram"].values()) == len(res.kept)
    assert stats["pass_rate"] == pytest.approx(res.pass_rate)
    assert stats == dataset_stats(res.kept, res.n_candidates, res.check_passes)
