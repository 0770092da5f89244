"""Deterministic synthetic corpus of paired images, captions, units, and features.

Each item is a scene of 1..3 colored shapes rendered onto a small image,
captioned by a fixed 30-word grammar ("red square left-of blue circle").
The caption maps through a fixed injective word-to-unit-subsequence code
(every code starts with a reserved word-start unit, so variable-length
codes stay uniquely decodable and concatenation never creates adjacent
repeats). The raw unit stream repeats every token 1..3 times, so
repetition removal is exercised, and the feature sequence places every
raw token at its generating centroid plus bounded uniform noise that is
small against half the minimum centroid separation, so quantizer recovery
is exact by construction.

Everything is a pure function of the seed; items derive per-index
sub-seeds and could be generated in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Codebook, FeatureSequence, UnitSequence, dedup, write_codebook, write_units
from .image_units import Image, write_ppm
from .quantizer import write_features

__all__ = [
    "VOCAB",
    "WORD_IDS",
    "build_word_codes",
    "caption_units",
    "decode_units",
    "Scene",
    "SceneObject",
    "render_scene",
    "CorpusItem",
    "Corpus",
    "gen_corpus",
    "split",
    "write_corpus",
    "read_manifest",
    "ManifestEntry",
]

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "gray")
SHAPES = ("square", "circle", "triangle", "diamond", "cross", "ring")
RELATIONS = ("left-of", "right-of", "above", "below")
SIZES = ("small", "large")
COUNTS = ("one", "two", "three")
POSITIONS = ("top", "bottom", "left", "right", "center", "corner")
VOCAB: tuple[str, ...] = COLORS + SHAPES + RELATIONS + ("and",) + SIZES + COUNTS + POSITIONS
WORD_IDS = {w: i for i, w in enumerate(VOCAB)}

WORD_START_UNIT = 0
_CODE_SEED = 7  # grammar-level constant, not the corpus seed

_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.90, 0.50, 0.10),
    "white": (1.00, 1.00, 1.00),
    "gray": (0.45, 0.45, 0.45),
}
_BACKGROUND = 0.78

_ANCHORS = {
    "top": (0.25, 0.50),
    "bottom": (0.75, 0.50),
    "left": (0.50, 0.25),
    "right": (0.50, 0.75),
    "center": (0.50, 0.50),
    "corner": (0.25, 0.25),
}
_PAIR_SLOTS = {
    "left-of": (("left",), ("right",)),
    "right-of": (("right",), ("left",)),
    "above": (("top",), ("bottom",)),
    "below": (("bottom",), ("top",)),
    "and": (("corner",), ("far",)),
}
_EXTRA_ANCHORS = {"far": (0.75, 0.75)}


def build_word_codes(n_units: int = 32) -> dict[str, tuple[int, ...]]:
    """Fixed injective word -> unit-subsequence map over ``n_units`` ids.

    Codes are 2..4 units long, begin with the reserved word-start unit, and
    contain no adjacent repeats, making any concatenation dedup-stable.
    """
    if n_units < 8:
        raise ValueError(f"unit vocabulary too small for the grammar: {n_units}")
    rng = np.random.default_rng(_CODE_SEED)
    codes: dict[str, tuple[int, ...]] = {}
    used: set[tuple[int, ...]] = set()
    for i, word in enumerate(VOCAB):
        tail_len = 1 + (i % 3)  # total code length 2..4
        while True:
            tail = [int(rng.integers(1, n_units))]
            while len(tail) < tail_len:
                nxt = int(rng.integers(1, n_units))
                if nxt != tail[-1]:
                    tail.append(nxt)
            key = tuple(tail)
            if key not in used:
                used.add(key)
                codes[word] = (WORD_START_UNIT, *key)
                break
    return codes


def caption_units(words, codes: dict[str, tuple[int, ...]], n_units: int = 32) -> UnitSequence:
    """Concatenated word codes; deduplicated by construction."""
    tokens: list[int] = []
    for word in words:
        tokens.extend(codes[word])
    return UnitSequence(tuple(tokens), n_units, deduplicated=True)


def decode_units(seq: UnitSequence, codes: dict[str, tuple[int, ...]]) -> tuple[str, ...] | None:
    """Invert :func:`caption_units`; None when the stream is not a caption."""
    by_tail = {code[1:]: word for word, code in codes.items()}
    words: list[str] = []
    current: list[int] = []
    started = False
    for tok in seq.tokens:
        if tok == WORD_START_UNIT:
            if started:
                word = by_tail.get(tuple(current))
                if word is None:
                    return None
                words.append(word)
            current = []
            started = True
        else:
            if not started:
                return None
            current.append(tok)
    if started:
        word = by_tail.get(tuple(current))
        if word is None:
            return None
        words.append(word)
    return tuple(words)


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    size: str
    anchor: tuple[float, float]  # (row, col) as fractions of the image


@dataclass(frozen=True)
class Scene:
    kind: str
    caption: tuple[str, ...]
    objects: tuple[SceneObject, ...]


def _shape_mask(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "cross":
        bar = r / 3.0
        horizontal = (np.abs(dy) <= bar) & (np.abs(dx) <= r)
        vertical = (np.abs(dx) <= bar) & (np.abs(dy) <= r)
        return horizontal | vertical
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r / 2.0) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: Scene, image_size: int) -> Image:
    pixels = np.full((image_size, image_size, 3), _BACKGROUND, dtype=np.float64)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    yy = yy + 0.5
    xx = xx + 0.5
    for obj in scene.objects:
        cy = obj.anchor[0] * image_size
        cx = obj.anchor[1] * image_size
        r = (0.12 if obj.size == "small" else 0.22) * image_size
        mask = _shape_mask(obj.shape, yy - cy, xx - cx, r)
        pixels[mask] = _RGB[obj.color]
    return Image(pixels)


def _anchor(name: str) -> tuple[float, float]:
    return _ANCHORS.get(name) or _EXTRA_ANCHORS[name]


def _sample_scene(rng: np.random.Generator) -> Scene:
    kind = ("single", "pair", "multi")[int(rng.choice(3, p=[0.4, 0.4, 0.2]))]
    if kind == "single":
        size = SIZES[int(rng.integers(len(SIZES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        pos = POSITIONS[int(rng.integers(len(POSITIONS)))]
        caption = ("one", size, color, shape, pos)
        objects = (SceneObject(color, shape, size, _anchor(pos)),)
        return Scene(kind, caption, objects)
    if kind == "pair":
        # two distinct (color, shape) pairs, lexicographically ordered so a
        # rendered image has exactly one generatable caption
        while True:
            a = (int(rng.integers(len(COLORS))), int(rng.integers(len(SHAPES))))
            b = (int(rng.integers(len(COLORS))), int(rng.integers(len(SHAPES))))
            if a != b:
                break
        a, b = min(a, b), max(a, b)
        rel = (*RELATIONS, "and")[int(rng.integers(5))]
        color_a, shape_a = COLORS[a[0]], SHAPES[a[1]]
        color_b, shape_b = COLORS[b[0]], SHAPES[b[1]]
        caption = (color_a, shape_a, rel, color_b, shape_b)
        slot_a, slot_b = _PAIR_SLOTS[rel]
        objects = (
            SceneObject(color_a, shape_a, "large", _anchor(slot_a[0])),
            SceneObject(color_b, shape_b, "large", _anchor(slot_b[0])),
        )
        return Scene(kind, caption, objects)
    count = ("two", "three")[int(rng.integers(2))]
    size = SIZES[int(rng.integers(len(SIZES)))]
    color = COLORS[int(rng.integers(len(COLORS)))]
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    caption = (count, size, color, shape)
    if count == "two":
        anchors = (_anchor("left"), _anchor("right"))
    else:
        anchors = (_anchor("corner"), _anchor("center"), _EXTRA_ANCHORS["far"])
    objects = tuple(SceneObject(color, shape, size, a) for a in anchors)
    return Scene("multi", caption, objects)


@dataclass(frozen=True)
class CorpusItem:
    item_id: str
    scene: Scene
    image: Image
    text_tokens: tuple[int, ...]
    units_raw: UnitSequence
    units: UnitSequence
    features: FeatureSequence


@dataclass(frozen=True)
class Corpus:
    items: tuple[CorpusItem, ...]
    codebook: Codebook
    word_codes: dict[str, tuple[int, ...]]
    seed: int
    image_size: int
    patch_size: int
    n_units: int
    feat_dim: int
    noise_sigma: float


def _min_centroid_distance(centroids: np.ndarray) -> float:
    diff = centroids[:, None, :] - centroids[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    d[np.diag_indices(len(centroids))] = np.inf
    return float(d.min())


def gen_corpus(
    seed: int,
    n_items: int,
    image_size: int = 32,
    patch_size: int = 4,
    n_units: int = 32,
    feat_dim: int = 8,
    noise_scale: float = 0.1,
    frame_rate_hz: float = 50.0,
) -> Corpus:
    """Generate ``n_items`` paired examples, deterministic given ``seed``.

    ``noise_scale`` is the feature-noise amplitude as a fraction of half the
    minimum inter-centroid distance of the generating codebook.
    """
    if n_items < 1:
        raise ValueError(f"n_items must be >= 1, got {n_items}")
    if patch_size < 1 or image_size % patch_size:
        raise ValueError(
            f"patch size {patch_size} must divide image size {image_size}"
        )
    master = np.random.default_rng(seed)
    codebook = Codebook(master.uniform(0.0, 1.0, size=(n_units, feat_dim)))
    centroids = codebook.centroids.astype(np.float64)
    sigma = noise_scale * _min_centroid_distance(centroids) / 2.0
    codes = build_word_codes(n_units)
    items = []
    for i in range(n_items):
        rng = np.random.default_rng([seed, i])
        scene = _sample_scene(rng)
        image = render_scene(scene, image_size)
        text_tokens = tuple(WORD_IDS[w] for w in scene.caption)
        units = caption_units(scene.caption, codes, n_units)
        raw_tokens: list[int] = []
        for tok in units.tokens:
            raw_tokens.extend([tok] * int(rng.integers(1, 4)))
        units_raw = UnitSequence(tuple(raw_tokens), n_units)
        noise = rng.uniform(-sigma, sigma, size=(len(raw_tokens), feat_dim))
        frames = centroids[np.asarray(raw_tokens, dtype=np.int64)] + noise
        features = FeatureSequence(frames, frame_rate_hz=frame_rate_hz)
        items.append(
            CorpusItem(
                item_id=f"item_{i:04d}",
                scene=scene,
                image=image,
                text_tokens=text_tokens,
                units_raw=units_raw,
                units=units,
                features=features,
            )
        )
    return Corpus(
        items=tuple(items),
        codebook=codebook,
        word_codes=codes,
        seed=seed,
        image_size=image_size,
        patch_size=patch_size,
        n_units=n_units,
        feat_dim=feat_dim,
        noise_sigma=sigma,
    )


def split(items, fractions: tuple[float, float, float], seed: int):
    """Disjoint, exhaustive train/val/test split.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be nonnegative, got {fractions}")
    n = len(items)
    # epsilon guards against 0.3 * 10 == 2.999... style float artifacts
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)

    def pick(idx):
        return [items[int(i)] for i in idx]

    train_idx = perm[: n - n_val - n_test]
    val_idx = perm[n - n_val - n_test : n - n_test]
    test_idx = perm[n - n_test :]
    return pick(train_idx), pick(val_idx), pick(test_idx)


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    image_path: Path
    text_tokens: tuple[int, ...]
    units_path: Path
    features_path: Path


MANIFEST_HEADER = "# id\timage\ttext\tunits\tfeatures"


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write images, unit streams, features, the generating codebook, and the manifest."""
    out = Path(out_dir)
    for sub in ("images", "units", "feats"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for item in corpus.items:
        image_rel = f"images/{item.item_id}.ppm"
        units_rel = f"units/{item.item_id}.ucu"
        feats_rel = f"feats/{item.item_id}.ufm"
        write_ppm(item.image, out / image_rel)
        write_units(item.units, out / units_rel)
        write_features(item.features, out / feats_rel)
        text = " ".join(str(t) for t in item.text_tokens)
        lines.append(f"{item.item_id}\t{image_rel}\t{text}\t{units_rel}\t{feats_rel}")
    write_codebook(corpus.codebook, out / "gen_codebook.ucb")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ValueError(f"manifest line needs 5 tab-separated fields: {line!r}")
        item_id, image_rel, text, units_rel, feats_rel = cols
        tokens = tuple(int(t) for t in text.split()) if text else ()
        entries.append(
            ManifestEntry(
                item_id=item_id,
                image_path=base / image_rel,
                text_tokens=tokens,
                units_path=base / units_rel,
                features_path=base / feats_rel,
            )
        )
    return entries
