"""Procedural embedding world.

Stands in for the frozen image/text encoders and the image generator.  A scene
is a 2x2 grid of (object, color) cells plus a global style; "images" are
seeded random-projection embeddings of scenes and captions are closed-grammar
token sequences, so every triplet has exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import templates

N_CELLS = 4
POSITION_WORDS = ("top-left", "top-right", "bottom-left", "bottom-right")
EMPTY_TOKEN = ""

_OBJECT_NAMES = (
    "apple", "pear", "peach", "plum",
    "cat", "dog", "fox", "wolf",
    "car", "bus", "truck", "van",
    "chair", "table", "sofa", "bed",
)
_COLOR_NAMES = ("red", "orange", "yellow", "pink", "blue", "green", "purple", "teal")
_STYLE_NAMES = ("photo", "sketch", "painting", "cartoon")

# independent rng streams under the world seed
_STREAM_VOCAB, _STREAM_PROJ, _STREAM_TEXT = 1, 2, 3
_STREAM_NOISE, _STREAM_MASK, _STREAM_CORPUS = 11, 12, 13


class VocabConstructionError(RuntimeError):
    pass


class InapplicableInstruction(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    embed_dim: int = 64
    n_objects: int = 16
    n_colors: int = 8
    n_styles: int = 4
    n_object_clusters: int = 4
    n_color_clusters: int = 2
    n_style_clusters: int = 1
    instance_noise_sigma: float = 0.02
    text_len: int = 16
    # weight of the position-independent, text-aligned part of a cell's projection
    align: float = 0.6
    # scale of the per-position offsets added to text token rows
    text_pos_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ValueError("embed_dim must be >= 8")
        for n, k, what in (
            (self.n_objects, self.n_object_clusters, "object"),
            (self.n_colors, self.n_color_clusters, "color"),
            (self.n_styles, self.n_style_clusters, "style"),
        ):
            if k < 1 or n % k:
                raise ValueError(f"{what} cluster count {k} must divide vocab size {n}")
        if self.instance_noise_sigma < 0:
            raise ValueError("instance_noise_sigma must be >= 0")
        if not 0.0 <= self.align <= 1.0:
            raise ValueError("align must lie in [0, 1]")
        if self.text_len < 1 + 3 * N_CELLS:
            raise ValueError(f"text_len must fit a caption ({1 + 3 * N_CELLS} tokens)")

    @property
    def n_scenes(self) -> int:
        return (self.n_objects * self.n_colors) ** N_CELLS * self.n_styles


@dataclass(frozen=True)
class Scene:
    cells: tuple[tuple[int, int], ...]  # (object_id, color_id) per grid cell
    style: int

    def __post_init__(self):
        if len(self.cells) != N_CELLS:
            raise ValueError(f"a scene has exactly {N_CELLS} cells")

    def as_array(self) -> np.ndarray:
        """[o0, c0, o1, c1, o2, c2, o3, c3, style]"""
        return np.array([v for cell in self.cells for v in cell] + [self.style], dtype=np.int64)

    @classmethod
    def from_array(cls, arr) -> "Scene":
        a = [int(v) for v in arr]
        return cls(cells=tuple((a[2 * p], a[2 * p + 1]) for p in range(N_CELLS)), style=a[8])

    def scene_id(self, config: WorldConfig) -> int:
        """Mixed-radix integer identifying the scene; unique within a world."""
        sid = self.style
        for o, c in self.cells:
            sid = (sid * config.n_objects + o) * config.n_colors + c
        return sid

    def validate(self, config: WorldConfig) -> None:
        for o, c in self.cells:
            if not (0 <= o < config.n_objects and 0 <= c < config.n_colors):
                raise ValueError(f"cell ({o}, {c}) outside vocab ranges")
        if not 0 <= self.style < config.n_styles:
            raise ValueError(f"style {self.style} outside vocab range")


@dataclass(frozen=True)
class RegionMask:
    bits: tuple[bool, ...] = (False,) * N_CELLS

    def __post_init__(self):
        if len(self.bits) != N_CELLS:
            raise ValueError(f"a mask has exactly {N_CELLS} bits")
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def cell(cls, index: int) -> "RegionMask":
        return cls(tuple(i == index for i in range(N_CELLS)))

    @classmethod
    def from_int(cls, value: int) -> "RegionMask":
        return cls(tuple(bool(value >> i & 1) for i in range(N_CELLS)))

    def to_int(self) -> int:
        return sum(1 << i for i, b in enumerate(self.bits) if b)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    @property
    def empty(self) -> bool:
        return not any(self.bits)

    @property
    def region(self) -> int | None:
        """The single masked cell, or None if the mask is not a single cell."""
        on = [i for i, b in enumerate(self.bits) if b]
        return on[0] if len(on) == 1 else None


@dataclass(frozen=True)
class TextTokens:
    token_ids: tuple[int, ...] = ()

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class ParsedInstruction:
    source: str | None
    target: str | None
    region: int | None = None
    template_id: int | None = None


@dataclass
class AttributeVocab:
    object_words: list[str]
    color_words: list[str]
    style_words: list[str]
    word_embeddings: dict[str, np.ndarray]
    cluster_of: dict[str, int]
    kind_of: dict[str, str] = field(default_factory=dict)

    def words(self) -> list[str]:
        return self.object_words + self.color_words + self.style_words

    def matrix(self) -> np.ndarray:
        return np.stack([self.word_embeddings[w] for w in self.words()])

    def cosine(self, a: str, b: str) -> float:
        return float(self.word_embeddings[a] @ self.word_embeddings[b])

    def index_of(self, word: str) -> int:
        """Index of a word within its own kind's list."""
        kind = self.kind_of[word]
        return getattr(self, f"{kind}_words").index(word)


def _names(base, n, prefix):
    if n <= len(base):
        return list(base[:n])
    return list(base) + [f"{prefix}{i}" for i in range(len(base), n)]


def _cluster_words(centroid, n, lo, hi, rng, max_tries):
    """n unit vectors around a centroid whose pairwise cosines lie in [lo, hi]."""
    dim = centroid.shape[0]
    target = 0.5 * (lo + hi)
    for _ in range(max_tries):
        u = rng.standard_normal((n, dim)) / np.sqrt(dim)
        u -= np.outer(u @ centroid, centroid)

        def build(gamma):
            w = centroid[None, :] + gamma * u
            return w / np.linalg.norm(w, axis=1, keepdims=True)

        def mean_cos(gamma):
            w = build(gamma)
            g = w @ w.T
            return g[np.triu_indices(n, 1)].mean()

        a, b = 0.0, 50.0
        for _ in range(80):
            mid = 0.5 * (a + b)
            if mean_cos(mid) > target:
                a = mid
            else:
                b = mid
        w = build(0.5 * (a + b))
        if n == 1:
            return w
        cos = (w @ w.T)[np.triu_indices(n, 1)]
        if cos.min() >= lo and cos.max() <= hi:
            return w
    return None


def make_vocab(config: WorldConfig, band=(0.5, 0.7), cross_max=0.3, max_tries=200) -> AttributeVocab:
    """Clustered word embeddings: in-cluster cosines in `band`, cross-cluster below `cross_max`."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STREAM_VOCAB]))
    dim = config.embed_dim
    kinds = (
        ("object", _names(_OBJECT_NAMES, config.n_objects, "object"), config.n_object_clusters),
        ("color", _names(_COLOR_NAMES, config.n_colors, "color"), config.n_color_clusters),
        ("style", _names(_STYLE_NAMES, config.n_styles, "style"), config.n_style_clusters),
    )
    n_clusters = sum(k for _, _, k in kinds)
    if n_clusters > dim:
        raise VocabConstructionError(f"{n_clusters} clusters do not fit in {dim} dimensions")

    for _ in range(max_tries):
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_clusters)))
        centroids = q.T
        emb, cluster_of, kind_of = {}, {}, {}
        cid = 0
        ok = True
        for kind, words, k in kinds:
            size = len(words) // k
            for j in range(k):
                members = words[j * size:(j + 1) * size]
                vecs = _cluster_words(centroids[cid], size, band[0], band[1], rng, max_tries)
                if vecs is None:
                    ok = False
                    break
                for w, v in zip(members, vecs):
                    emb[w], cluster_of[w], kind_of[w] = v, cid, kind
                cid += 1
            if not ok:
                break
        if not ok:
            continue
        names = list(emb)
        mat = np.stack([emb[w] for w in names])
        gram = mat @ mat.T
        cl = np.array([cluster_of[w] for w in names])
        cross = cl[:, None] != cl[None, :]
        if gram[cross].max(initial=-1.0) < cross_max:
            return AttributeVocab(
                object_words=kinds[0][1],
                color_words=kinds[1][1],
                style_words=kinds[2][1],
                word_embeddings=emb,
                cluster_of=cluster_of,
                kind_of=kind_of,
            )
    raise VocabConstructionError(
        f"could not realise cosine band {band} with cross-cluster < {cross_max} "
        f"after {max_tries} attempts (embed_dim={dim})"
    )


def _seed_rng(*keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


class ToyWorld:
    """Seeded encoders and ground-truth semantics for one world configuration.

    Immutable after construction; all methods are pure.
    """

    def __init__(self, config: WorldConfig | None = None):
        self.config = config = config or WorldConfig()
        self.vocab = make_vocab(config)
        dim = config.embed_dim
        v = self.vocab

        rng = _seed_rng(config.seed, _STREAM_PROJ)
        a = config.align
        b = np.sqrt(1.0 - a * a)
        e_obj = np.stack([v.word_embeddings[w] for w in v.object_words])
        e_col = np.stack([v.word_embeddings[w] for w in v.color_words])
        self.style_table = np.stack([v.word_embeddings[w] for w in v.style_words])
        # cell projection P_p (e_obj (+) e_col) = a (e_obj + e_col) + b R_p (e_obj (+) e_col)
        self.proj = rng.standard_normal((N_CELLS, dim, 2 * dim)) / np.sqrt(dim)
        r_obj = np.einsum("pij,nj->pni", self.proj[:, :, :dim], e_obj)
        r_col = np.einsum("pij,nj->pni", self.proj[:, :, dim:], e_col)
        self.object_table = a * e_obj[None] + b * r_obj  # (cells, n_objects, dim)
        self.color_table = a * e_col[None] + b * r_col

        self.tokens = [EMPTY_TOKEN] + v.words() + list(POSITION_WORDS)
        for w in templates.template_words():
            if w not in self.tokens:
                self.tokens.append(w)
        self.token_id = {w: i for i, w in enumerate(self.tokens)}
        rng = _seed_rng(config.seed, _STREAM_TEXT)
        table = rng.standard_normal((len(self.tokens), dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        for w in v.words():
            table[self.token_id[w]] = v.word_embeddings[w]
        self.token_table = table
        self.pos_offsets = config.text_pos_scale * rng.standard_normal((config.text_len, dim)) / np.sqrt(dim)

    # ---- scenes -------------------------------------------------------------

    def random_scenes(self, rng: np.random.Generator, n: int) -> np.ndarray:
        c = self.config
        out = np.empty((n, 2 * N_CELLS + 1), dtype=np.int64)
        out[:, 0:8:2] = rng.integers(0, c.n_objects, size=(n, N_CELLS))
        out[:, 1:8:2] = rng.integers(0, c.n_colors, size=(n, N_CELLS))
        out[:, 8] = rng.integers(0, c.n_styles, size=n)
        return out

    def random_scene(self, rng: np.random.Generator) -> Scene:
        return Scene.from_array(self.random_scenes(rng, 1)[0])

    def scene_ids(self, scenes: np.ndarray) -> np.ndarray:
        c = self.config
        sid = scenes[:, 8].copy()
        for p in range(N_CELLS):
            sid = (sid * c.n_objects + scenes[:, 2 * p]) * c.n_colors + scenes[:, 2 * p + 1]
        return sid

    # ---- image encoder ------------------------------------------------------

    def cell_contributions(self, scenes: np.ndarray) -> np.ndarray:
        """(n, cells, dim) pre-normalisation contribution of every cell."""
        cells = np.arange(N_CELLS)
        return self.object_table[cells, scenes[:, 0:8:2]] + self.color_table[cells, scenes[:, 1:8:2]]

    def render_batch(self, scenes: np.ndarray, eta: np.ndarray, mask=None, mask_noise=None) -> np.ndarray:
        """Vectorised renderer with explicit noise draws.

        eta: (n, dim) standard normal instance noise.  mask: (n, cells) bits;
        mask_noise: (n, cells, dim) standard normal, used where mask is set.
        """
        contrib = self.cell_contributions(scenes)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            scale = np.linalg.norm(contrib, axis=2, keepdims=True) / np.sqrt(self.config.embed_dim)
            contrib = np.where(mask[:, :, None], scale * mask_noise, contrib)
        vec = contrib.sum(axis=1) + self.style_table[scenes[:, 8]] + self.config.instance_noise_sigma * eta
        return vec / np.linalg.norm(vec, axis=1, keepdims=True)

    def instance_noise(self, noise_seed: int) -> np.ndarray:
        return _seed_rng(self.config.seed, _STREAM_NOISE, noise_seed).standard_normal(self.config.embed_dim)

    def mask_noise(self, noise_seed: int) -> np.ndarray:
        rng = _seed_rng(self.config.seed, _STREAM_MASK, noise_seed)
        return rng.standard_normal((N_CELLS, self.config.embed_dim))

    def render_image(self, scene: Scene, noise_seed: int) -> np.ndarray:
        scene.validate(self.config)
        eta = self.instance_noise(noise_seed)
        return self.render_batch(scene.as_array()[None], eta[None])[0]

    def render_masked_image(self, scene: Scene, mask: RegionMask, noise_seed: int) -> np.ndarray:
        """Render with masked cells' contributions swapped for Gaussian noise of the same norm."""
        scene.validate(self.config)
        eta = self.instance_noise(noise_seed)
        return self.render_batch(
            scene.as_array()[None], eta[None],
            mask=np.array(mask.bits)[None], mask_noise=self.mask_noise(noise_seed)[None],
        )[0]

    # ---- text ---------------------------------------------------------------

    def tokenize(self, text: str) -> TextTokens:
        ids = []
        for w in text.split():
            if w not in self.token_id or w == EMPTY_TOKEN:
                raise KeyError(f"unknown word {w!r}")
            ids.append(self.token_id[w])
        return TextTokens(tuple(ids))

    def detokenize(self, tokens: TextTokens) -> str:
        return " ".join(self.tokens[i] for i in tokens.token_ids)

    def caption_of(self, scene: Scene) -> TextTokens:
        v = self.vocab
        words = [v.style_words[scene.style]]
        for p, (o, c) in enumerate(scene.cells):
            words += [POSITION_WORDS[p], v.color_words[c], v.object_words[o]]
        return TextTokens(tuple(self.token_id[w] for w in words))

    def parse_caption(self, tokens: TextTokens) -> Scene:
        words = [self.tokens[i] for i in tokens.token_ids]
        v = self.vocab
        if len(words) != 1 + 3 * N_CELLS or words[0] not in v.style_words:
            raise ValueError(f"not a caption: {' '.join(words)!r}")
        cells = []
        for p in range(N_CELLS):
            pos, col, obj = words[1 + 3 * p: 4 + 3 * p]
            if pos != POSITION_WORDS[p] or col not in v.color_words or obj not in v.object_words:
                raise ValueError(f"not a caption: {' '.join(words)!r}")
            cells.append((v.object_words.index(obj), v.color_words.index(col)))
        return Scene(tuple(cells), v.style_words.index(words[0]))

    def token_array(self, tokens: TextTokens) -> np.ndarray:
        """Token ids padded to text_len with -1; the empty caption becomes the '' token."""
        ids = list(tokens.token_ids) or [self.token_id[EMPTY_TOKEN]]
        if len(ids) > self.config.text_len:
            raise ValueError(f"{len(ids)} tokens exceed text_len={self.config.text_len}")
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise KeyError(f"unknown token id {i}")
        out = np.full(self.config.text_len, -1, dtype=np.int64)
        out[: len(ids)] = ids
        return out

    def encode_token_arrays(self, ids: np.ndarray) -> np.ndarray:
        """(n, text_len) padded ids -> (n, text_len, dim); padding rows are zero."""
        valid = ids >= 0
        rows = self.token_table[np.where(valid, ids, 0)] + self.pos_offsets[None, : ids.shape[1]]
        return np.where(valid[..., None], rows, 0.0)

    def encode_text(self, tokens: TextTokens) -> np.ndarray:
        return self.encode_token_arrays(self.token_array(tokens)[None])[0]

    def pooled_text(self, tokens: TextTokens) -> np.ndarray:
        """Mean of the non-padding rows of the encoded text."""
        return self.encode_text(tokens)[: max(len(tokens), 1)].mean(axis=0)

    def word_embedding(self, word: str) -> np.ndarray:
        return self.vocab.word_embeddings[word]

    # ---- semantics ----------------------------------------------------------

    def apply_instruction(self, scene: Scene, instr: ParsedInstruction) -> Scene:
        """Ground-truth edit: replace every occurrence of source by target, or only
        the instructed cell when a region is given."""
        v = self.vocab
        if instr.target is None:
            raise InapplicableInstruction("instruction has no target attribute")
        kind = v.kind_of.get(instr.target)
        if kind is None or (instr.source is not None and v.kind_of.get(instr.source) != kind):
            raise InapplicableInstruction(f"incompatible words {instr.source!r} -> {instr.target!r}")
        tgt = v.index_of(instr.target)
        src = None if instr.source is None else v.index_of(instr.source)

        if kind == "style":
            if instr.region is not None:
                raise InapplicableInstruction("style edits cannot be localised to a region")
            if src is not None and scene.style != src:
                raise InapplicableInstruction(f"scene has no {instr.source!r}")
            if src is None:
                raise InapplicableInstruction("target-only instruction without a region")
            return Scene(scene.cells, tgt)

        slot = 0 if kind == "object" else 1
        cells = [list(c) for c in scene.cells]
        if instr.region is not None:
            if not 0 <= instr.region < N_CELLS:
                raise InapplicableInstruction(f"region {instr.region} outside the grid")
            cells[instr.region][slot] = tgt
        else:
            if src is None:
                raise InapplicableInstruction("target-only instruction without a region")
            hits = [c for c in cells if c[slot] == src]
            if not hits:
                raise InapplicableInstruction(f"scene has no {instr.source!r}")
            for c in hits:
                c[slot] = tgt
        return Scene(tuple(tuple(c) for c in cells), scene.style)

    # ---- corpus -------------------------------------------------------------

    def build_corpus(self, n: int, seed: int) -> list[tuple[Scene, np.ndarray]]:
        """n distinct scenes, each rendered once with its own noise seed."""
        if n < 0 or n > self.config.n_scenes:
            raise ValueError(f"cannot draw {n} distinct scenes from {self.config.n_scenes}")
        rng = _seed_rng(self.config.seed, _STREAM_CORPUS, seed)
        scenes, seen = [], set()
        while len(scenes) < n:
            batch = self.random_scenes(rng, max(n - len(scenes), 16))
            for row in batch:
                key = tuple(int(x) for x in row)
                if key not in seen and len(scenes) < n:
                    seen.add(key)
                    scenes.append(row)
        if not scenes:
            return []
        arr = np.stack(scenes)
        noise_seeds = corpus_noise_seeds(seed, n)
        eta = np.stack([self.instance_noise(s) for s in noise_seeds])
        vecs = self.render_batch(arr, eta)
        return [(Scene.from_array(r), v) for r, v in zip(arr, vecs)]


def corpus_noise_seeds(seed: int, n: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(n)]
