"""Three-term classifier-free guidance and query composition.

    x0 = f(0_T, 0_I, m) + w_I [f(0_T, z_R, m) - f(0_T, 0_I, m)]
                        + w_T [f(c_T, z_R, m) - f(0_T, z_R, m)]

combined in clean-embedding space.  A negative text replaces every null-text
slot 0_T.  The three evaluations run as one batched model call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import ConditionBundle, Denoiser
from .diffusion import NoiseSchedule, cosine_schedule, ddim_sample, gaussian_init, make_bundle, null_text_ids
from .toyworld import RegionMask, TextTokens, ToyWorld


@dataclass(frozen=True)
class GuidanceSpec:
    w_I: float = 1.5
    w_T: float = 7.5
    negative_text: TextTokens | None = None
    n_steps: int = 10
    seed: int = 0
    clip_norm: float | None = 2.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def guided_prediction(model: Denoiser, z_t: torch.Tensor, t: int, cond: ConditionBundle, spec: GuidanceSpec,
                      null_text: torch.Tensor, null_pad: torch.Tensor) -> torch.Tensor:
    """Guided clean-embedding prediction for a batch.

    null_text/null_pad: encoded empty caption, broadcastable to cond.text.
    cond.negative_text, when present, stands in for the null text.
    """
    n = z_t.shape[0]
    if cond.negative_text is not None:
        base_text, base_pad = cond.negative_text, cond.negative_pad
    else:
        base_text = null_text.expand_as(cond.text)
        base_pad = null_pad.expand_as(cond.text_pad)
    zeros = torch.zeros_like(cond.image)
    stacked = ConditionBundle(
        text=torch.cat([base_text, base_text, cond.text]),
        text_pad=torch.cat([base_pad, base_pad, cond.text_pad]),
        image=torch.cat([zeros, cond.image, cond.image]),
        mask=torch.cat([cond.mask, cond.mask, cond.mask]),
    )
    out = model(torch.cat([z_t, z_t, z_t]), torch.full((3 * n,), t, dtype=torch.long), stacked)
    f_u, f_i, f_f = out[:n], out[n:2 * n], out[2 * n:]
    return f_u + spec.w_I * (f_i - f_u) + spec.w_T * (f_f - f_i)


def query_seeds(seed: int, n: int, offset: int = 0) -> list[int]:
    """Per-query init seeds derived from the guidance seed and the query index."""
    return [int(np.random.SeedSequence([seed, offset + i]).generate_state(1)[0]) for i in range(n)]


@torch.no_grad()
def compose_batch(model: Denoiser, world: ToyWorld, refs: np.ndarray, instructions: np.ndarray,
                  masks: np.ndarray, spec: GuidanceSpec, schedule: NoiseSchedule | None = None,
                  negatives: np.ndarray | None = None, seeds=None, offset: int = 0) -> np.ndarray:
    """Compose many queries: (n, dim) refs, (n, text_len) padded instruction ids, (n, 4) masks."""
    schedule = schedule or cosine_schedule(model.cfg.n_timesteps)
    model.eval()
    dtype = model.in_proj.weight.dtype
    n = len(refs)
    if negatives is None and spec.negative_text is not None:
        negatives = np.repeat(world.token_array(spec.negative_text)[None], n, axis=0)
    cond = make_bundle(world, instructions, refs, masks, dtype, negative_ids=negatives)
    nt = world.encode_token_arrays(null_text_ids(world, 1))
    null_text = torch.as_tensor(nt, dtype=dtype)
    null_pad = torch.as_tensor(null_text_ids(world, 1) < 0)
    if seeds is None:
        seeds = query_seeds(spec.seed, n, offset)
    init = gaussian_init(seeds, world.config.embed_dim, dtype)

    def predict(z, t):
        return guided_prediction(model, z, t, cond, spec, null_text, null_pad)

    scale = model.cfg.latent_scale
    clip = None if spec.clip_norm is None else spec.clip_norm * scale
    out = ddim_sample(predict, schedule, spec.n_steps, init, clip_norm=clip)
    return out.double().numpy()


def compose_query(model: Denoiser, world: ToyWorld, ref_embedding: np.ndarray, instruction: TextTokens,
                  mask: RegionMask, spec: GuidanceSpec, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Transform a reference embedding by an instruction into a unit-norm target estimate."""
    return compose_batch(
        model, world, np.asarray(ref_embedding)[None], world.token_array(instruction)[None],
        mask.as_array()[None], spec, schedule, seeds=[spec.seed],
    )[0]


def spec_to_record(spec: GuidanceSpec, instruction: TextTokens | None = None, mask: RegionMask | None = None) -> str:
    """Key-value text record of a query for evaluation manifests."""
    lines = [
        f"w_I={spec.w_I!r}",
        f"w_T={spec.w_T!r}",
        f"n_steps={spec.n_steps}",
        f"seed={spec.seed}",
        f"clip_norm={spec.clip_norm!r}",
        "negative=" + ("" if spec.negative_text is None else " ".join(map(str, spec.negative_text.token_ids))),
    ]
    if instruction is not None:
        lines.append("tokens=" + " ".join(map(str, instruction.token_ids)))
    if mask is not None:
        lines.append("mask=" + "".join("1" if b else "0" for b in mask.bits))
    return "\n".join(lines) + "\n"


def record_to_spec(text: str) -> tuple[GuidanceSpec, TextTokens | None, RegionMask | None]:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
    neg = kv.get("negative", "")
    clip = kv.get("clip_norm", "None")
    spec = GuidanceSpec(
        w_I=float(kv["w_I"]),
        w_T=float(kv["w_T"]),
        n_steps=int(kv["n_steps"]),
        seed=int(kv["seed"]),
        clip_norm=None if clip == "None" else float(clip),
        negative_text=TextTokens(tuple(int(x) for x in neg.split())) if neg else None,
    )
    instr = TextTokens(tuple(int(x) for x in kv["tokens"].split())) if "tokens" in kv else None
    mask = RegionMask(tuple(c == "1" for c in kv["mask"])) if "mask" in kv else None
    return spec, instr, mask
