import functools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcir.denoiser import DenoiserConfig, init_params
from latentcir.diffusion import caption_arrays, cosine_schedule, ddim_sample, make_bundle, null_text_ids
from latentcir.guidance import (
    GuidanceSpec,
    compose_batch,
    compose_query,
    guided_prediction,
    query_seeds,
    record_to_spec,
    spec_to_record,
)
from latentcir.toyworld import N_CELLS, RegionMask, TextTokens, ToyWorld, WorldConfig

SMALL = DenoiserConfig(depth=2, heads=2, head_dim=16, model_dim=32, mask_hidden=16)


@pytest.fixture(scope="module")
def model():
    return init_params(SMALL, 4).double().eval()


@pytest.fixture(scope="module")
def inputs(world):
    rng = np.random.default_rng(9)
    n = 6
    scenes = world.random_scenes(rng, n)
    text = caption_arrays(world, scenes)
    refs = world.render_batch(scenes, rng.standard_normal((n, 64)))
    masks = (rng.random((n, N_CELLS)) < 0.4).astype(float)
    return text, refs, masks


def _nulls(world):
    ids = null_text_ids(world, 1)
    return torch.as_tensor(world.encode_token_arrays(ids), dtype=torch.float64), torch.as_tensor(ids < 0)


def _direct(model, world, text, image, mask):
    cond = make_bundle(world, text, image, mask, torch.float64)
    return lambda z, t: model(z, torch.full((len(z),), t), cond)


def _guided(model, world, text, refs, masks, spec, negatives=None):
    cond = make_bundle(world, text, refs, masks, torch.float64, negative_ids=negatives)
    nt, npad = _nulls(world)
    return lambda z, t: guided_prediction(model, z, t, cond, spec, nt, npad)


def _per_step_max_diff(f, g, n_steps=8, n=6):
    """Run the sampler on f and compare f and g at every visited (z_t, t)."""
    sched = cosine_schedule(1000)
    worst = 0.0
    visited = []

    def record(z, t):
        visited.append((z.clone(), t))
        return f(z, t)

    init = torch.randn(n, 64, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    ddim_sample(record, sched, n_steps, init, clip_norm=None)
    with torch.no_grad():
        for z, t in visited:
            worst = max(worst, (f(z, t) - g(z, t)).abs().max().item())
    return worst, len(visited)


def test_full_weights_telescope_to_conditional(model, world, inputs):
    text, refs, masks = inputs
    with torch.no_grad():
        diff, steps = _per_step_max_diff(
            _guided(model, world, text, refs, masks, GuidanceSpec(w_I=1.0, w_T=1.0)),
            _direct(model, world, text, refs, masks),
        )
    assert steps == 8 and diff < 1e-6


def test_zero_weights_give_unconditional(model, world, inputs):
    text, refs, masks = inputs
    null = null_text_ids(world, len(text))
    with torch.no_grad():
        diff, _ = _per_step_max_diff(
            _guided(model, world, text, refs, masks, GuidanceSpec(w_I=0.0, w_T=0.0)),
            _direct(model, world, null, np.zeros_like(refs), masks),
        )
    assert diff < 1e-6


@functools.lru_cache(maxsize=1)
def _world_and_model():
    # hypothesis tests cannot take function-scoped fixtures
    return ToyWorld(WorldConfig()), init_params(SMALL, 4).double().eval()


@given(st.floats(-3, 8), st.floats(-3, 12))
@settings(max_examples=25, deadline=None)
def test_guidance_is_affine_in_weights(w_I, w_T):
    world, model = _world_and_model()
    rng = np.random.default_rng(0)
    scenes = world.random_scenes(rng, 3)
    text, refs = caption_arrays(world, scenes), world.render_batch(scenes, rng.standard_normal((3, 64)))
    masks = np.zeros((3, N_CELLS))
    z = torch.randn(3, 64, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    null = null_text_ids(world, 3)
    with torch.no_grad():
        f_u = _direct(model, world, null, np.zeros_like(refs), masks)(z, 300)
        f_i = _direct(model, world, null, refs, masks)(z, 300)
        f_f = _direct(model, world, text, refs, masks)(z, 300)
        got = _guided(model, world, text, refs, masks, GuidanceSpec(w_I=w_I, w_T=w_T))(z, 300)
    assert torch.allclose(got, f_u + w_I * (f_i - f_u) + w_T * (f_f - f_i), atol=1e-9)


def test_zero_text_weight_ignores_text(model, world, inputs):
    text, refs, masks = inputs
    other = caption_arrays(world, world.random_scenes(np.random.default_rng(1), len(text)))
    spec = GuidanceSpec(w_I=1.5, w_T=0.0, seed=3)
    a = compose_batch(model, world, refs, text, masks, spec)
    b = compose_batch(model, world, refs, other, masks, spec)
    assert np.allclose(a, b, atol=1e-12)


def test_negative_equal_to_positive_cancels_text_term(model, world, inputs):
    text, refs, masks = inputs
    spec = GuidanceSpec(w_I=1.5, w_T=7.5, seed=3)
    a = compose_batch(model, world, refs, text, masks, spec, negatives=text)
    b = compose_batch(model, world, refs, text, masks, GuidanceSpec(w_I=1.5, w_T=0.0, seed=3), negatives=text)
    assert np.allclose(a, b, atol=1e-10)


def test_negative_text_replaces_null_slots(model, world, inputs):
    text, refs, masks = inputs
    neg = caption_arrays(world, world.random_scenes(np.random.default_rng(2), len(text)))
    z = torch.randn(len(text), 64, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    w_I, w_T = 1.5, 7.5
    with torch.no_grad():
        f_u = _direct(model, world, neg, np.zeros_like(refs), masks)(z, 500)
        f_i = _direct(model, world, neg, refs, masks)(z, 500)
        f_f = _direct(model, world, text, refs, masks)(z, 500)
        got = _guided(model, world, text, refs, masks, GuidanceSpec(w_I=w_I, w_T=w_T), negatives=neg)(z, 500)
    assert torch.allclose(got, f_u + w_I * (f_i - f_u) + w_T * (f_f - f_i), atol=1e-9)


def test_one_batched_call_per_step(model, world, inputs):
    text, refs, masks = inputs
    calls = []
    hook = model.register_forward_hook(lambda m, args, out: calls.append(args[0].shape[0]))
    compose_batch(model, world, refs, text, masks, GuidanceSpec(n_steps=4))
    hook.remove()
    assert calls == [3 * len(text)] * 4


def test_compose_query_unit_norm_and_deterministic(model, world, inputs):
    text, refs, masks = inputs
    instr = TextTokens(tuple(int(x) for x in text[0] if x >= 0))
    spec = GuidanceSpec(seed=11, n_steps=5)
    a = compose_query(model, world, refs[0], instr, RegionMask((True, False, False, False)), spec)
    b = compose_query(model, world, refs[0], instr, RegionMask((True, False, False, False)), spec)
    assert a.shape == (64,)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)
    assert np.array_equal(a, b)


def test_compose_batch_matches_single_queries(model, world, inputs):
    text, refs, masks = inputs
    spec = GuidanceSpec(seed=2, n_steps=3)
    batch = compose_batch(model, world, refs, text, masks, spec)
    seeds = query_seeds(spec.seed, len(text))
    for i in range(len(text)):
        one = compose_batch(model, world, refs[i:i + 1], text[i:i + 1], masks[i:i + 1], spec, seeds=[seeds[i]])
        assert np.allclose(one[0], batch[i], atol=1e-10)


def test_query_seeds_distinct():
    s = query_seeds(0, 1000)
    assert len(set(s)) == 1000
    assert query_seeds(0, 5, offset=3) == s[3:8]


def test_spec_record_round_trip():
    spec = GuidanceSpec(w_I=0.25, w_T=12.0, negative_text=TextTokens((4, 9)), n_steps=50, seed=7, clip_norm=None)
    instr, mask = TextTokens((1, 2, 3)), RegionMask((False, True, True, False))
    assert record_to_spec(spec_to_record(spec, instr, mask)) == (spec, instr, mask)
    plain = GuidanceSpec()
    assert record_to_spec(spec_to_record(plain)) == (plain, None, None)


def test_spec_rejects_zero_steps():
    with pytest.raises(ValueError):
        GuidanceSpec(n_steps=0)
