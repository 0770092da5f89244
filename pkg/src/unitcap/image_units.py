"""Patch-level vector quantization of images into discrete image units.

An image is cut into non-overlapping ``P x P`` patches (row-major over the
grid, row-major within each patch), each patch is assigned to its nearest
codebook centroid, and the resulting id lattice is the image's unit grid.
Flattening the grid row-major yields the token sequence consumed by the
decoder. Decoding tiles centroid patches back into pixel space and is used
for diagnostics only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .core import (
    Codebook,
    DataFormatError,
    FeatureSequence,
    UnitSequence,
    read_units,
    write_units,
)
from .quantizer import DEFAULT_MAX_ITERS, DEFAULT_TOL, kmeans_fit, nearest_units
from .validation import check_finite

__all__ = [
    "Image",
    "PatchGrid",
    "patchify",
    "fit_image_codebook",
    "encode_image",
    "decode_image",
    "PatchQuantizer",
    "read_ppm",
    "write_ppm",
    "write_grid",
    "read_grid",
]

DEFAULT_PATCH_SIZE = 8
DEFAULT_IMAGE_UNITS = 8192  # 13-bit image-unit codebook at full scale


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C pixel block with every value in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"pixels must be H x W x C, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"image has an empty dimension: {arr.shape}")
        check_finite(arr, "pixels")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Image":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """2-D lattice of image-unit ids plus the source geometry that produced it."""

    units: np.ndarray  # (grid_h, grid_w) integer ids
    codebook_size: int
    patch_size: int
    height: int
    width: int

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.units, dtype=np.int64)
        if arr.ndim != 2:
            raise ValueError(f"units must be 2-D, got shape {arr.shape}")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if arr.size and (arr.min() < 0 or arr.max() >= self.codebook_size):
            raise ValueError(f"unit ids must lie in [0, {self.codebook_size})")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.height != arr.shape[0] * self.patch_size or self.width != arr.shape[1] * self.patch_size:
            raise ValueError(
                f"geometry mismatch: grid {arr.shape} * patch {self.patch_size} "
                f"!= image {self.height}x{self.width}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "units", arr)

    @property
    def grid_h(self) -> int:
        return int(self.units.shape[0])

    @property
    def grid_w(self) -> int:
        return int(self.units.shape[1])

    def flatten(self) -> UnitSequence:
        """Row-major token sequence for the decoder."""
        return UnitSequence(tuple(int(u) for u in self.units.reshape(-1)), self.codebook_size)


def _check_divisible(img: Image, patch_size: int) -> None:
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if img.height % patch_size or img.width % patch_size:
        raise ValueError(
            f"patch size {patch_size} does not divide image {img.height}x{img.width}"
        )


def patchify(img: Image, patch_size: int) -> FeatureSequence:
    """Flatten each P x P x C patch into one row, patches ordered row-major."""
    _check_divisible(img, patch_size)
    gh, gw = img.height // patch_size, img.width // patch_size
    cube = img.pixels.reshape(gh, patch_size, gw, patch_size, img.channels)
    rows = cube.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * img.channels)
    return FeatureSequence(rows, frame_rate_hz=1.0)


def _unpatchify(rows: np.ndarray, grid_h: int, grid_w: int, patch_size: int, channels: int) -> np.ndarray:
    cube = rows.reshape(grid_h, grid_w, patch_size, patch_size, channels)
    return cube.transpose(0, 2, 1, 3, 4).reshape(grid_h * patch_size, grid_w * patch_size, channels)


def fit_image_codebook(
    images,
    n_units: int = DEFAULT_IMAGE_UNITS,
    patch_size: int = DEFAULT_PATCH_SIZE,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Codebook:
    """K-means codebook over all patches pooled from ``images``."""
    pools = [patchify(img, patch_size).frames for img in images]
    if not pools:
        raise ValueError("need at least one image to fit a codebook")
    pooled = np.concatenate(pools, axis=0)
    if pooled.shape[0] < n_units:
        raise ValueError(
            f"insufficient patches: pooled {pooled.shape[0]} < requested {n_units} units"
        )
    return kmeans_fit(pooled, n_units, seed=seed, max_iters=max_iters, tol=tol)


def encode_image(img: Image, cb: Codebook, patch_size: int = DEFAULT_PATCH_SIZE) -> PatchGrid:
    """Tokenize an image into its unit grid by per-patch nearest-centroid lookup."""
    feats = patchify(img, patch_size)
    if feats.dim != cb.dim:
        raise ValueError(
            f"patch dim {feats.dim} (P={patch_size}, C={img.channels}) != codebook dim {cb.dim}"
        )
    gh, gw = img.height // patch_size, img.width // patch_size
    ids = nearest_units(feats.frames, cb.centroids).reshape(gh, gw)
    return PatchGrid(ids, cb.k, patch_size, img.height, img.width)


def decode_image(grid: PatchGrid, cb: Codebook) -> Image:
    """Replace every cell by its centroid patch, clamped into pixel range."""
    if int(grid.units.max(initial=0)) >= cb.k:
        raise ValueError(f"grid references unit >= codebook size {cb.k}")
    patch_dim = grid.patch_size * grid.patch_size
    if cb.dim % patch_dim:
        raise ValueError(
            f"codebook dim {cb.dim} is not a multiple of patch area {patch_dim}"
        )
    channels = cb.dim // patch_dim
    rows = cb.centroids.astype(np.float64)[grid.units.reshape(-1)]
    pixels = _unpatchify(rows, grid.grid_h, grid.grid_w, grid.patch_size, channels)
    return Image(np.clip(pixels, 0.0, 1.0))


class PatchQuantizer(BaseEstimator):
    """Image tokenizer with a fit/transform estimator surface.

    ``fit`` pools patches from a corpus of images and learns the codebook;
    ``transform`` maps an image to its unit grid; ``inverse_transform``
    reconstructs the centroid tiling.
    """

    def __init__(
        self,
        n_units: int = DEFAULT_IMAGE_UNITS,
        patch_size: int = DEFAULT_PATCH_SIZE,
        max_iters: int = DEFAULT_MAX_ITERS,
        tol: float = DEFAULT_TOL,
        seed: int = 0,
    ):
        self.n_units = n_units
        self.patch_size = patch_size
        self.max_iters = max_iters
        self.tol = tol
        self.seed = seed

    def fit(self, images, y=None) -> "PatchQuantizer":
        imgs = [img if isinstance(img, Image) else Image(img) for img in images]
        self.codebook_ = fit_image_codebook(
            imgs,
            n_units=self.n_units,
            patch_size=self.patch_size,
            seed=self.seed,
            max_iters=self.max_iters,
            tol=self.tol,
        )
        return self

    def transform(self, img) -> PatchGrid:
        if not hasattr(self, "codebook_"):
            raise NotFittedError("PatchQuantizer must be fitted before transform")
        if not isinstance(img, Image):
            img = Image(img)
        return encode_image(img, self.codebook_, self.patch_size)

    def inverse_transform(self, grid: PatchGrid) -> Image:
        if not hasattr(self, "codebook_"):
            raise NotFittedError("PatchQuantizer must be fitted before inverse_transform")
        return decode_image(grid, self.codebook_)


def read_ppm(path) -> Image:
    """Read a binary (P6) 8-bit PPM file, mapping values by v / 255."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise DataFormatError("truncated PPM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace() and data[end : end + 1] != b"#":
                end += 1
            fields.append(data[pos:end])
            pos = end
    if fields[0] != b"P6":
        raise DataFormatError(f"not a binary PPM (P6) file: magic {fields[0]!r}")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise DataFormatError(f"bad PPM header fields: {exc}") from exc
    if maxval != 255:
        raise DataFormatError(f"only 8-bit PPM supported, got maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise DataFormatError(f"truncated PPM payload: wanted {expected}, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image.from_uint8(arr)


def write_ppm(img: Image, path) -> None:
    if img.channels != 3:
        raise ValueError(f"PPM output needs 3 channels, image has {img.channels}")
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.to_uint8().tobytes())


def _geom_path(path) -> Path:
    return Path(str(path) + ".geom")


def write_grid(grid: PatchGrid, path) -> None:
    """Write the flattened unit stream plus a key=value geometry sidecar."""
    write_units(grid.flatten(), path)
    lines = [
        f"grid_h={grid.grid_h}",
        f"grid_w={grid.grid_w}",
        f"patch_size={grid.patch_size}",
        f"height={grid.height}",
        f"width={grid.width}",
    ]
    _geom_path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_grid(path) -> PatchGrid:
    seq = read_units(path)
    geom_file = _geom_path(path)
    if not geom_file.exists():
        raise DataFormatError(f"missing geometry sidecar {geom_file}")
    geom: dict[str, int] = {}
    for line in geom_file.read_text(encoding="ascii").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        try:
            geom[key.strip()] = int(value.strip())
        except ValueError as exc:
            raise DataFormatError(f"bad geometry line {line!r}") from exc
    try:
        gh, gw = geom["grid_h"], geom["grid_w"]
        patch_size, height, width = geom["patch_size"], geom["height"], geom["width"]
    except KeyError as exc:
        raise DataFormatError(f"geometry sidecar missing key {exc}") from exc
    if gh * gw != len(seq):
        raise DataFormatError(
            f"unit stream length {len(seq)} != grid_h*grid_w = {gh * gw}"
        )
    try:
        return PatchGrid(seq.to_array().reshape(gh, gw), seq.vocab_size, patch_size, height, width)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc
