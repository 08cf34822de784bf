"""Transformer denoiser predicting the clean embedding.

The self-attention trunk sees exactly two tokens (noisy embedding, timestep);
text, reference image and mask conditions enter only through cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

N_MASK_CELLS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    head_dim: int = 16
    model_dim: int = 64
    dropout: float = 0.1
    text_len: int = 16
    ff_mult: int = 4
    mask_hidden: int = 64
    n_timesteps: int = 1000
    # diffusion runs on embeddings multiplied by this factor (unit norm -> per-dim variance ~1)
    latent_scale: float = 8.0

    def __post_init__(self):
        if self.heads * self.head_dim != self.model_dim:
            raise ValueError("heads * head_dim must equal model_dim")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def cond_len(self) -> int:
        return self.text_len + 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionBundle:
    """Batched conditions.  text_pad marks padding rows (True = ignore)."""

    text: Tensor  # (B, text_len, embed_dim)
    text_pad: Tensor  # (B, text_len) bool
    image: Tensor  # (B, embed_dim); all-zero is the image null
    mask: Tensor  # (B, 4) mask bits as reals; all-zero is the mask null
    negative_text: Tensor | None = None
    negative_pad: Tensor | None = None

    def __len__(self):
        return self.text.shape[0]

    def replace(self, **kw) -> "ConditionBundle":
        return replace(self, **kw)

    @staticmethod
    def cat(bundles) -> "ConditionBundle":
        return ConditionBundle(
            text=torch.cat([b.text for b in bundles]),
            text_pad=torch.cat([b.text_pad for b in bundles]),
            image=torch.cat([b.image for b in bundles]),
            mask=torch.cat([b.mask for b in bundles]),
        )


def sinusoidal(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, cfg: DenoiserConfig, cross: bool):
        super().__init__()
        d = cfg.model_dim
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)
        self.cross = cross

    def forward(self, x: Tensor, ctx: Tensor, key_pad: Tensor | None = None) -> Tensor:
        b, n, d = x.shape
        m = ctx.shape[1]
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k, v = self.kv(ctx).view(b, m, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm block: self-attention, cross-attention over conditions, GELU MLP."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.model_dim
        self.ln_self = nn.LayerNorm(d)
        self.self_attn = Attention(cfg, cross=False)
        self.ln_cross = nn.LayerNorm(d)
        self.cross_attn = Attention(cfg, cross=True)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.ff_mult * d), nn.GELU(), nn.Linear(cfg.ff_mult * d, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, cond, cond_pad):
        h = self.ln_self(x)
        x = x + self.drop(self.self_attn(h, h))
        x = x + self.drop(self.cross_attn(self.ln_cross(x), cond, cond_pad))
        x = x + self.drop(self.ff(self.ln_ff(x)))
        return x


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d, e = cfg.model_dim, cfg.embed_dim
        self.in_proj = nn.Linear(e, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))
        self.token_type = nn.Parameter(torch.zeros(2, d))
        self.text_proj = nn.Linear(e, d)
        self.image_proj = nn.Linear(e, d)
        self.mask_mlp = nn.Sequential(
            nn.Linear(N_MASK_CELLS, cfg.mask_hidden), nn.SiLU(), nn.Linear(cfg.mask_hidden, d)
        )
        self.cond_type = nn.Parameter(torch.zeros(3, d))
        self.cond_norm = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.ln_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, e)

    def time_embedding(self, t: Tensor) -> Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if (t < 0).any() or (t > self.cfg.n_timesteps).any():
            raise ValueError(f"timestep outside [0, {self.cfg.n_timesteps}]")
        dtype = self.in_proj.weight.dtype
        return self.time_mlp(sinusoidal(t, self.cfg.model_dim).to(dtype))

    def mask_embed(self, mask: Tensor) -> Tensor:
        return self.mask_mlp(mask.to(self.in_proj.weight.dtype))

    def condition_tokens(self, cond: ConditionBundle) -> tuple[Tensor, Tensor]:
        text = self.text_proj(cond.text) + self.cond_type[0]
        image = self.image_proj(cond.image)[:, None] + self.cond_type[1]
        mask = self.mask_embed(cond.mask)[:, None] + self.cond_type[2]
        seq = self.cond_norm(torch.cat([text, image, mask], dim=1))
        pad = torch.cat([cond.text_pad, torch.zeros_like(cond.text_pad[:, :2])], dim=1)
        return seq, pad

    def forward(self, z: Tensor, t: Tensor, cond: ConditionBundle) -> Tensor:
        if not torch.isfinite(z).all():
            raise ValueError("non-finite denoiser input")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        x = torch.stack([self.in_proj(z), self.time_embedding(t)], dim=1) + self.token_type
        ctx, pad = self.condition_tokens(cond)
        for block in self.blocks:
            x = block(x, ctx, pad)
        return self.out(self.ln_out(x[:, 0]))


def init_params(cfg: DenoiserConfig, seed: int, dtype=torch.float32) -> Denoiser:
    """Scaled Gaussian init: std 0.02, residual output projections 0.02/sqrt(depth)."""
    gen = torch.Generator().manual_seed(seed)
    model = Denoiser(cfg)
    residual = 0.02 / math.sqrt(cfg.depth)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith(("ln_", "cond_norm")):
                p.fill_(1.0)
            else:
                std = residual if name.endswith(("attn.out.weight", "ff.2.weight")) else 0.02
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
    return model.to(dtype)


class EMA:
    """Exponential moving average of the parameters: shadow <- d*shadow + (1-d)*w."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module):
        d = self.decay
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(d).add_(v.detach(), alpha=1.0 - d)

    def copy_to(self, model: nn.Module):
        model.load_state_dict(self.shadow)


def parameter_groups(model: nn.Module) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name, _ in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


def check_gradients(model: nn.Module, loss_fn, n_params: int = 200, h: float = 1e-4, seed: int = 0,
                    min_per_group: int = 4, abs_floor: float = 1e-7) -> dict:
    """Compare autograd gradients against central finite differences.

    `loss_fn(model)` must be a deterministic scalar function of the parameters.
    Runs in float64 on a copy.  Relative error per sampled scalar is
    |g - fd| / max(|g|, |fd|, abs_floor).  Returns the overall maximum and the
    maximum per parameter group.
    """
    import copy

    model = copy.deepcopy(model).double()
    model.eval()
    params = dict(model.named_parameters())
    model.zero_grad()
    loss_fn(model).backward()
    grads = {k: p.grad.detach().clone() for k, p in params.items()}

    rng = np.random.default_rng(seed)
    groups = parameter_groups(model)
    sizes = {k: p.numel() for k, p in params.items()}
    total = sum(sizes.values())
    names = list(params)
    probs = np.array([sizes[k] for k in names], dtype=np.float64) / total
    picks = [(names[i], int(rng.integers(sizes[names[i]]))) for i in rng.choice(len(names), n_params, p=probs)]
    for members in groups.values():
        for _ in range(min_per_group):
            k = members[int(rng.integers(len(members)))]
            picks.append((k, int(rng.integers(sizes[k]))))

    per_group: dict[str, float] = {}
    group_of = {k: g for g, members in groups.items() for k in members}
    worst = 0.0
    with torch.no_grad():
        for k, idx in picks:
            flat = params[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_fn(model).item()
            flat[idx] = orig - h
            down = loss_fn(model).item()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            g = grads[k].view(-1)[idx].item()
            err = abs(g - fd) / max(abs(g), abs(fd), abs_floor)
            worst = max(worst, err)
            grp = group_of[k]
            per_group[grp] = max(per_group.get(grp, 0.0), err)
    return {"max_rel_error": worst, "per_group": per_group, "n_checked": len(picks)}
