"""Noise schedule, training objectives, the two-stage training loop and DDIM.

The denoiser predicts the clean embedding directly.  Stage 1 trains text to
image conversion only; stage 2 mixes text-to-image, masked conversion and
triplet batches with probabilities `task_mix`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .denoiser import EMA, ConditionBundle, Denoiser
from .schedule import NoiseSchedule, cosine_schedule, q_sample
from .toyworld import N_CELLS, POSITION_WORDS, ToyWorld

log = logging.getLogger(__name__)

TASKS = ("t2i", "masked", "triplet")


class TrainingDiverged(RuntimeError):
    pass


# ---- batches ----------------------------------------------------------------


@dataclass
class TripletArrays:
    """Column view of a CIR triplet set used for stage-2 triplet batches."""

    ref: np.ndarray  # (n, dim)
    target: np.ndarray  # (n, dim)
    instruction: np.ndarray  # (n, text_len) token ids, -1 padded
    mask: np.ndarray  # (n, 4)

    def __len__(self):
        return len(self.ref)

    @classmethod
    def from_triplets(cls, world: ToyWorld, triplets) -> "TripletArrays":
        dim, L = world.config.embed_dim, world.config.text_len
        if not triplets:
            return cls(np.zeros((0, dim)), np.zeros((0, dim)), np.zeros((0, L), np.int64), np.zeros((0, N_CELLS)))
        return cls(
            ref=np.stack([t.ref_embedding for t in triplets]),
            target=np.stack([t.target_embedding for t in triplets]),
            instruction=np.stack([world.token_array(t.instruction) for t in triplets]),
            mask=np.stack([t.mask.as_array() for t in triplets]),
        )


@dataclass
class Batch:
    """Homogeneous batch: the loss regresses `target` from noised `source`."""

    task: str
    target: np.ndarray  # clean embedding to predict
    source: np.ndarray  # variable that gets noised
    text_ids: np.ndarray
    image: np.ndarray
    mask: np.ndarray


def caption_arrays(world: ToyWorld, scenes: np.ndarray) -> np.ndarray:
    """Vectorised caption_of: (n, 9) scenes -> (n, text_len) token ids."""
    tid = world.token_id
    v = world.vocab
    obj = np.array([tid[w] for w in v.object_words])
    col = np.array([tid[w] for w in v.color_words])
    sty = np.array([tid[w] for w in v.style_words])
    pos = np.array([tid[w] for w in POSITION_WORDS])
    n = len(scenes)
    out = np.full((n, world.config.text_len), -1, dtype=np.int64)
    out[:, 0] = sty[scenes[:, 8]]
    for p in range(N_CELLS):
        out[:, 1 + 3 * p] = pos[p]
        out[:, 2 + 3 * p] = col[scenes[:, 2 * p + 1]]
        out[:, 3 + 3 * p] = obj[scenes[:, 2 * p]]
    return out


class TrainingData:
    """Batch source: fresh toy-world scenes for the conversion tasks, a fixed
    forged triplet set for the triplet task."""

    def __init__(self, world: ToyWorld, triplets: TripletArrays | None = None):
        self.world = world
        self.triplets = triplets

    def batch(self, task: str, size: int, rng: np.random.Generator) -> Batch:
        w = self.world
        dim = w.config.embed_dim
        if task == "triplet":
            if self.triplets is None or not len(self.triplets):
                raise ValueError("triplet batches need a non-empty triplet set")
            idx = rng.integers(len(self.triplets), size=size)
            tr = self.triplets
            return Batch(task, tr.target[idx], tr.target[idx], tr.instruction[idx], tr.ref[idx], tr.mask[idx])
        scenes = w.random_scenes(rng, size)
        eta = rng.standard_normal((size, dim))
        clean = w.render_batch(scenes, eta)
        text = caption_arrays(w, scenes)
        if task == "t2i":
            zeros = np.zeros((size, dim))
            return Batch(task, clean, clean, text, zeros, np.zeros((size, N_CELLS)))
        if task == "masked":
            codes = rng.integers(1, 2**N_CELLS, size=size)
            mask = ((codes[:, None] >> np.arange(N_CELLS)) & 1).astype(np.float64)
            masked = w.render_batch(scenes, eta, mask, rng.standard_normal((size, N_CELLS, dim)))
            return Batch(task, clean, masked, text, masked, mask)
        raise ValueError(f"unknown task {task!r}")


# ---- conditions ---------------------------------------------------------------


def null_text_ids(world: ToyWorld, n: int) -> np.ndarray:
    from .toyworld import TextTokens

    return np.repeat(world.token_array(TextTokens())[None], n, axis=0)


def make_bundle(world: ToyWorld, text_ids, image, mask, dtype=torch.float32, negative_ids=None) -> ConditionBundle:
    text_ids = np.asarray(text_ids)
    b = ConditionBundle(
        text=torch.as_tensor(world.encode_token_arrays(text_ids), dtype=dtype),
        text_pad=torch.as_tensor(text_ids < 0),
        image=torch.as_tensor(np.asarray(image), dtype=dtype),
        mask=torch.as_tensor(np.asarray(mask), dtype=dtype),
    )
    if negative_ids is not None:
        negative_ids = np.asarray(negative_ids)
        b.negative_text = torch.as_tensor(world.encode_token_arrays(negative_ids), dtype=dtype)
        b.negative_pad = torch.as_tensor(negative_ids < 0)
    return b


def condition_dropout(world: ToyWorld, text_ids: np.ndarray, image: np.ndarray, mask: np.ndarray,
                      rng: np.random.Generator, p: float):
    """Independently null the text and image slot of each item with probability p.

    The mask slot is never dropped.  Returns (text_ids, image, mask, drop_text, drop_image).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("drop probability must lie in [0, 1]")
    n = len(text_ids)
    drop_text = rng.random(n) < p
    drop_image = rng.random(n) < p
    text_ids = np.where(drop_text[:, None], null_text_ids(world, n), text_ids)
    image = np.where(drop_image[:, None], 0.0, image)
    return text_ids, image, mask, drop_text, drop_image


# ---- loss -----------------------------------------------------------------------


def compute_loss(model: Denoiser, world: ToyWorld, batch: Batch, schedule: NoiseSchedule,
                 rng: np.random.Generator, drop_prob: float = 0.0, t=None, eps=None):
    """Mean over the batch of ||target - model(q_sample(source, t, eps), t | cond)||^2.

    The model works on latents scaled by `model.cfg.latent_scale`; the loss is
    reported in unit-embedding units.  Returns (loss, info) where info records
    the dropout decisions.
    """
    if batch.task not in TASKS:
        raise ValueError(f"unknown task {batch.task!r}")
    n, dim = batch.target.shape
    if batch.source.shape != (n, dim) or batch.image.shape != (n, dim):
        raise ValueError("batch tensors have mismatched shapes")
    dtype = model.in_proj.weight.dtype
    text_ids, image, mask = batch.text_ids, batch.image, batch.mask
    drop_t = drop_i = np.zeros(n, dtype=bool)
    if drop_prob > 0:
        text_ids, image, mask, drop_t, drop_i = condition_dropout(world, text_ids, image, mask, rng, drop_prob)
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal((n, dim))
    scale = model.cfg.latent_scale
    z_t = q_sample(scale * batch.source, t, eps, schedule)
    cond = make_bundle(world, text_ids, image, mask, dtype)
    pred = model(torch.as_tensor(z_t, dtype=dtype), torch.as_tensor(t), cond) / scale
    target = torch.as_tensor(batch.target, dtype=dtype)
    loss = ((pred - target) ** 2).sum(dim=1).mean()
    had_mask = batch.mask.any(axis=1)
    info = {
        "drop_text": int(drop_t.sum()),
        "drop_image": int((drop_i & batch.image.any(axis=1)).sum()),
        "mask_items": int(had_mask.sum()),
        "mask_nulled": int((had_mask & ~mask.any(axis=1)).sum()),
    }
    return loss, info


# ---- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage1_steps: int = 20000
    stage2_steps: int = 10000
    batch: int = 128
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-4
    weight_decay: float = 6.0e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # horizon ~500 steps, short against stage 2 so stage-1 weights wash out
    ema_decay: float = 0.998
    cond_drop_prob: float = 0.1
    task_mix: tuple[float, float, float] = (0.3, 0.3, 0.4)
    n_timesteps: int = 1000
    checkpoint_every: int = 0
    log_every: int = 500

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.task_mix = tuple(self.task_mix)
        if abs(sum(self.task_mix) - 1.0) > 1e-9 or min(self.task_mix) < 0:
            raise ValueError("task_mix must be a probability vector")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def to_dict(self) -> dict:
        return asdict(self)


def step_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step])


class Trainer:
    """Two-stage trainer.  Step k draws all its randomness from (seed, k), so a
    run resumed from a checkpoint reproduces the uninterrupted trace."""

    def __init__(self, model: Denoiser, world: ToyWorld, data: TrainingData, config: TrainConfig, seed: int,
                 schedule: NoiseSchedule | None = None):
        self.model = model
        self.world = world
        self.data = data
        self.config = config
        self.seed = seed
        self.schedule = schedule or cosine_schedule(config.n_timesteps)
        decay, plain = [], []
        for name, p in model.named_parameters():
            (decay if p.ndim >= 2 and not name.endswith("_type") else plain).append(p)
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": config.weight_decay}, {"params": plain, "weight_decay": 0.0}],
            lr=config.lr_stage1, betas=config.betas, eps=config.adam_eps,
        )
        self.ema = EMA(model, config.ema_decay)
        self.step = 0
        self.trace: list[dict] = []

    def stage(self, step: int) -> int:
        return 1 if step < self.config.stage1_steps else 2

    def task_for(self, step: int, rng: np.random.Generator) -> str:
        if self.stage(step) == 1:
            return "t2i"
        return TASKS[int(rng.choice(3, p=self.config.task_mix))]

    def train_step(self) -> dict:
        cfg = self.config
        step = self.step
        ss = step_seed(self.seed, step)
        rng = np.random.default_rng(ss)
        torch.manual_seed(int(ss.generate_state(1)[0]))
        lr = cfg.lr_stage1 if self.stage(step) == 1 else cfg.lr_stage2
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        task = self.task_for(step, rng)
        batch = self.data.batch(task, cfg.batch, rng)
        self.model.train()
        loss, info = compute_loss(self.model, self.world, batch, self.schedule, rng, cfg.cond_drop_prob)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step} (task {task})")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.ema.update(self.model)
        self.step += 1
        rec = {"step": step, "stage": self.stage(step), "task": task, "loss": value, **info}
        self.trace.append(rec)
        return rec

    def run(self, until: int | None = None, on_step=None):
        until = self.config.total_steps if until is None else min(until, self.config.total_steps)
        while self.step < until:
            rec = self.train_step()
            if self.config.log_every and rec["step"] % self.config.log_every == 0:
                log.info("step %d stage %d %s loss %.5f", rec["step"], rec["stage"], rec["task"], rec["loss"])
            if on_step is not None:
                on_step(self, rec)
        return self


def train(model: Denoiser, world: ToyWorld, data: TrainingData, config: TrainConfig, seed: int,
          schedule: NoiseSchedule | None = None) -> Trainer:
    return Trainer(model, world, data, config, seed, schedule).run()


# ---- sampling -------------------------------------------------------------------------


def timestep_grid(T: int, n_steps: int) -> np.ndarray:
    """n_steps evenly spaced timesteps from T down towards 1 (descending, distinct)."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}]")
    return np.round(np.linspace(T, 0, n_steps + 1)[:-1]).astype(np.int64)


def ddim_sample(predict, schedule: NoiseSchedule, n_steps: int, init: torch.Tensor,
                clip_norm: float | None = 2.0, normalize: bool = True, return_trajectory: bool = False):
    """Deterministic (eta = 0) DDIM driven by a clean-embedding predictor.

    predict(z_t, t) -> x0_hat for a batch.  Each x0_hat is turned into the
    implied noise and stepped to the next grid time; the last x0_hat is the
    output (unit-normalised by default).
    """
    ab = schedule.alpha_bar
    grid = timestep_grid(schedule.T, n_steps)
    z = init
    traj = []
    x0 = None
    for i, t in enumerate(grid):
        t_next = int(grid[i + 1]) if i + 1 < len(grid) else 0
        x0 = predict(z, int(t))
        if clip_norm is not None:
            norms = x0.norm(dim=-1, keepdim=True)
            x0 = x0 * torch.clamp(clip_norm / norms.clamp_min(1e-12), max=1.0)
        a_t, a_n = ab[t], ab[t_next]
        eps = (z - math.sqrt(a_t) * x0) / math.sqrt(1.0 - a_t)
        z = math.sqrt(a_n) * x0 + math.sqrt(1.0 - a_n) * eps
        if return_trajectory:
            traj.append(z)
    out = x0 / x0.norm(dim=-1, keepdim=True) if normalize else x0
    return (out, traj) if return_trajectory else out


def gaussian_init(seeds, dim: int, dtype=torch.float32) -> torch.Tensor:
    """One standard normal starting point per seed."""
    return torch.as_tensor(
        np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds]), dtype=dtype
    )
