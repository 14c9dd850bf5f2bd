"""Prompt sets, synthetic text embedding, and procedural target scenes.

The Animals and Portraits sets are full keyword cross products rendered
through fixed sentence templates (a null keyword drops its clause).  The
synthetic embedder stands in for a pretrained text encoder at desk scale:
each token hashes to a reproducible unit-norm Gaussian vector.  Target scenes
give the synthetic score oracle something to pull renders toward: a sphere
colored by the species/figure keyword with a smaller hat-colored sphere above
it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .conditioner import TextCondition
from .renderer import CameraPose, generate_rays

SPECIES = ("wolf", "dog", "panda", "fox", "civet", "cat", "red panda",
           "teddy bear", "rabbit", "koala")
ITEMS = ("in a bathtub", "on a stone", "on books", "on a table", "on the lawn",
         "in a basket", None)
GADGETS = ("a tie", "a cape", "sunglasses", "a scarf", None)
HATS = ("beret", "beanie", "cowboy hat", "straw hat", "baseball cap", "tophat",
        "party hat", "sombrero", None)

FIGURES = ("a white man", "a white woman", "a boy", "a girl", "an elderly man",
           "an elderly woman", "a black woman", "a black man", "Obama", "Kobe")
PORTRAIT_HATS = ("Santa hat", "peaked cap", "steampunk hat", "crown")
EXPRESSIONS = ("laughing", "crying", "grinning", "singing", "shouting",
               "looking ahead with a very serious expression",
               "opening mouth wide in shock", "angry", "talking", "feeling sad")


@dataclass
class PromptRecord:
    id: int
    text: str
    keywords: dict
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "text": self.text,
                           "keywords": self.keywords, "split": self.split},
                          ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "PromptRecord":
        obj = json.loads(line)
        return cls(id=int(obj["id"]), text=obj["text"],
                   keywords=obj["keywords"], split=obj["split"])


def animal_text(species: str, item, gadget, hat) -> str:
    clauses = []
    if item is not None:
        clauses.append(f"sitting {item}")
    if gadget is not None:
        clauses.append(f"wearing {gadget}")
    if hat is not None:
        clauses.append(f"wearing a {hat}")
    text = f"a {species}"
    if clauses:
        text += " " + " and ".join(clauses)
    return text


def portrait_text(figure: str, hat: str, expressing: str) -> str:
    return f"{figure} wearing a {hat} is {expressing}"


def gen_animals() -> list[PromptRecord]:
    """Full 10 x 7 x 5 x 9 cross product: 3150 records."""
    records = []
    i = 0
    for species in SPECIES:
        for item in ITEMS:
            for gadget in GADGETS:
                for hat in HATS:
                    records.append(PromptRecord(
                        id=i, text=animal_text(species, item, gadget, hat),
                        keywords={"species": species, "item": item,
                                  "gadget": gadget, "hat": hat}))
                    i += 1
    return records


def gen_portraits() -> list[PromptRecord]:
    """Full 10 x 4 x 10 cross product: 400 records."""
    records = []
    i = 0
    for figure in FIGURES:
        for hat in PORTRAIT_HATS:
            for expressing in EXPRESSIONS:
                records.append(PromptRecord(
                    id=i, text=portrait_text(figure, hat, expressing),
                    keywords={"figure": figure, "hat": hat,
                              "expressing": expressing}))
                i += 1
    return records


def split(records: list[PromptRecord], train_frac: float = 0.6,
          seed: int = 0) -> list[PromptRecord]:
    """Seeded shuffle-then-partition; mutates the split labels in place."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0,1), got {train_frac}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(train_frac * len(records)))
    train_ids = set(order[:n_train].tolist())
    for i, rec in enumerate(records):
        rec.split = "train" if i in train_ids else "test"
    return records


def write_jsonl(records: list[PromptRecord], path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_jsonl(path) -> list[PromptRecord]:
    with open(path, encoding="utf-8") as f:
        return [PromptRecord.from_json(line) for line in f if line.strip()]


# ----------------------------------------------------------------------
# synthetic text embedding
# ----------------------------------------------------------------------

@dataclass
class SyntheticEmbedder:
    """Hash-seeded Gaussian token embeddings; deterministic and unit-norm."""

    vocab_seed: int = 0
    dim: int = 64
    max_tokens: int = 16

    def token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.vocab_seed}:{token}".encode(),
                                 digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.normal(size=self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)


def embed(text: str, embedder: SyntheticEmbedder) -> TextCondition:
    """Whitespace-tokenize and embed; pad/truncate to the token cap.

    The sentence embedding is the normalized mean of the (real) token
    embeddings; padding rows are zero.
    """
    tokens = text.split()
    if not tokens:
        raise ValueError("cannot embed empty text")
    tokens = tokens[:embedder.max_tokens]
    mat = np.zeros((embedder.max_tokens, embedder.dim), dtype=np.float32)
    for i, tok in enumerate(tokens):
        mat[i] = embedder.token_vector(tok)
    mean = mat[:len(tokens)].mean(axis=0)
    sentence = mean / np.linalg.norm(mean)
    return TextCondition(token_embeddings=mat, sentence_embedding=sentence)


# ----------------------------------------------------------------------
# procedural target scenes
# ----------------------------------------------------------------------

def _palette(names, offset=0.0):
    # evenly spaced hues, converted to saturated RGB
    out = {}
    for i, name in enumerate(names):
        h = (i / len(names) + offset) % 1.0
        out[name] = np.array(_hsv_to_rgb(h, 0.85, 0.9), dtype=np.float32)
    return out


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


BODY_PALETTE = {**_palette(SPECIES), **_palette(FIGURES, offset=0.05)}
HAT_PALETTE = {**_palette([h for h in HATS if h], offset=0.37),
               **_palette(PORTRAIT_HATS, offset=0.61)}

BODY_SPHERE = (np.array([0.0, 0.0, 0.0]), 0.55)
HAT_SPHERE = (np.array([0.0, 0.0, 0.68]), 0.22)


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.sum(dirs * oc, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - radius * radius)
    hit = disc >= 0.0
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    hit &= t > 0.0
    return hit, np.where(hit, t, np.inf)


def target_scene(record: PromptRecord, pose: CameraPose, H: int, W: int,
                 background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Analytic rasterization of the record's target: body sphere colored by
    species/figure, optional hat sphere above colored by the hat keyword.
    Pure function of (record, pose).  Returns (H, W, 3) float32 in [0, 1]."""
    kw = record.keywords
    body_key = kw.get("species") or kw.get("figure")
    if body_key not in BODY_PALETTE:
        raise KeyError(f"no target palette entry for keyword {body_key!r}")
    hat_key = kw.get("hat")
    if hat_key is not None and hat_key not in HAT_PALETTE:
        raise KeyError(f"no target palette entry for hat {hat_key!r}")
    rays = generate_rays(pose, H, W)
    o = rays.origins.astype(np.float64)
    d = rays.directions.astype(np.float64)
    img = np.tile(np.asarray(background, dtype=np.float32), (H * W, 1))
    hit_b, t_b = _ray_sphere(o, d, *BODY_SPHERE)
    img[hit_b] = BODY_PALETTE[body_key]
    if hat_key is not None:
        hit_h, t_h = _ray_sphere(o, d, *HAT_SPHERE)
        front = hit_h & (t_h < t_b)
        img[front] = HAT_PALETTE[hat_key]
    return img.reshape(H, W, 3)
