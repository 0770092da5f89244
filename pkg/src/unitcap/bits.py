"""Storage-budget accounting for raw and unit-based representations.

Every function is exact integer arithmetic and linear in its count
arguments; ratios are kept as rationals and only rendered to one-decimal
percentages at print time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .core import token_bit_width

__all__ = [
    "bits_raw_image",
    "bits_image_units",
    "bits_raw_audio",
    "bits_mel",
    "bits_speech_units",
    "BitsReport",
    "report",
    "format_bits_report",
]

IMAGE_DEPTH_BITS = 8
AUDIO_SAMPLE_RATE = 16000
AUDIO_DEPTH_BITS = 16
AUDIO_DOWNSAMPLE_FACTOR = 320
MEL_FPS = 100
MEL_DIMS = 80
MEL_DEPTH_BITS = 32  # mel precision is a choice; the output-side claim
# holds against the raw waveform at any depth and against 32-bit mel


def bits_raw_image(height: int, width: int, channels: int = 3, depth: int = IMAGE_DEPTH_BITS) -> int:
    if height < 1 or width < 1 or channels < 1 or depth < 1:
        raise ValueError("image geometry and depth must be positive")
    return height * width * channels * depth


def bits_image_units(
    height: int,
    width: int,
    patch_size: int = 8,
    n_units: int = 8192,
) -> int:
    if patch_size < 1 or height % patch_size or width % patch_size:
        raise ValueError(
            f"patch size {patch_size} must divide image {height}x{width}"
        )
    return (height // patch_size) * (width // patch_size) * token_bit_width(n_units)


def _count(duration_s: float, per_second: int) -> int:
    if duration_s < 0:
        raise ValueError(f"duration must be nonnegative, got {duration_s}")
    return math.floor(Fraction(duration_s) * per_second)


def bits_raw_audio(duration_s: float, sample_rate: int = AUDIO_SAMPLE_RATE, depth: int = AUDIO_DEPTH_BITS) -> int:
    if sample_rate < 1 or depth < 1:
        raise ValueError("sample rate and depth must be positive")
    return _count(duration_s, sample_rate) * depth


def bits_mel(
    duration_s: float,
    fps: int = MEL_FPS,
    dims: int = MEL_DIMS,
    depth: int = MEL_DEPTH_BITS,
) -> int:
    if fps < 1 or dims < 1 or depth < 1:
        raise ValueError("mel parameters must be positive")
    return _count(duration_s, fps) * dims * depth


def bits_speech_units(
    duration_s: float,
    sample_rate: int = AUDIO_SAMPLE_RATE,
    factor: int = AUDIO_DOWNSAMPLE_FACTOR,
    n_units: int = 200,
    observed_len: int | None = None,
) -> int:
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if observed_len is not None:
        if observed_len < 0:
            raise ValueError("observed_len must be nonnegative")
        length = observed_len
    else:
        length = _count(duration_s, sample_rate) // factor
    return length * token_bit_width(n_units)


@dataclass(frozen=True)
class BitsReport:
    raw_image_bits: int
    image_unit_bits: int
    raw_audio_bits: int
    mel_bits: int
    speech_unit_bits_prededup: int
    speech_unit_bits_postdedup: int
    image_ratio: Fraction
    speech_ratio_vs_raw: Fraction
    speech_ratio_vs_mel: Fraction


def _ratio(numer: int, denom: int) -> Fraction:
    return Fraction(numer, denom) if denom else Fraction(0)


def report(
    image_h: int,
    image_w: int,
    duration_s: float,
    image_c: int = 3,
    image_depth: int = IMAGE_DEPTH_BITS,
    patch_size: int = 8,
    image_codebook: int = 8192,
    sample_rate: int = AUDIO_SAMPLE_RATE,
    audio_depth: int = AUDIO_DEPTH_BITS,
    mel_fps: int = MEL_FPS,
    mel_dims: int = MEL_DIMS,
    mel_depth: int = MEL_DEPTH_BITS,
    factor: int = AUDIO_DOWNSAMPLE_FACTOR,
    speech_codebook: int = 200,
    prededup_len: int | None = None,
    dedup_len: int | None = None,
) -> BitsReport:
    """Assemble the full storage comparison for one image/audio configuration.

    ``prededup_len``/``dedup_len`` are measured token counts; when absent the
    pre-dedup length is derived from the duration and the dedup row repeats it.
    The headline ratios compare pre-dedup unit bits against each reference
    (repetition removal only shrinks them further).
    """
    raw_image = bits_raw_image(image_h, image_w, image_c, image_depth)
    image_units = bits_image_units(image_h, image_w, patch_size, image_codebook)
    raw_audio = bits_raw_audio(duration_s, sample_rate, audio_depth)
    mel = bits_mel(duration_s, mel_fps, mel_dims, mel_depth)
    if prededup_len is None:
        prededup_len = _count(duration_s, sample_rate) // factor
    if dedup_len is None:
        dedup_len = prededup_len
    if dedup_len > prededup_len:
        raise ValueError(
            f"dedup length {dedup_len} exceeds pre-dedup length {prededup_len}"
        )
    width = token_bit_width(speech_codebook)
    pre_bits = prededup_len * width
    post_bits = dedup_len * width
    return BitsReport(
        raw_image_bits=raw_image,
        image_unit_bits=image_units,
        raw_audio_bits=raw_audio,
        mel_bits=mel,
        speech_unit_bits_prededup=pre_bits,
        speech_unit_bits_postdedup=post_bits,
        image_ratio=_ratio(image_units, raw_image),
        speech_ratio_vs_raw=_ratio(pre_bits, raw_audio),
        speech_ratio_vs_mel=_ratio(pre_bits, mel),
    )


def _pct(x: Fraction) -> str:
    return f"{float(x) * 100:.1f}%"


def format_bits_report(rep: BitsReport) -> str:
    """Fixed-field table followed by a machine-readable key=value block."""
    rows = [
        ("raw_image", rep.raw_image_bits),
        ("image_units", rep.image_unit_bits),
        ("raw_audio", rep.raw_audio_bits),
        ("mel_spectrogram", rep.mel_bits),
        ("speech_units_prededup", rep.speech_unit_bits_prededup),
        ("speech_units_postdedup", rep.speech_unit_bits_postdedup),
    ]
    lines = [f"{'representation':<24}{'bits':>12}"]
    lines += [f"{name:<24}{bits:>12}" for name, bits in rows]
    lines.append("")
    lines.append(f"{'image_units / raw_image':<28}{_pct(rep.image_ratio):>8}  ({rep.image_ratio})")
    lines.append(f"{'speech_units / raw_audio':<28}{_pct(rep.speech_ratio_vs_raw):>8}  ({rep.speech_ratio_vs_raw})")
    lines.append(f"{'speech_units / mel':<28}{_pct(rep.speech_ratio_vs_mel):>8}  ({rep.speech_ratio_vs_mel})")
    lines.append("")
    kv = {
        "raw_image_bits": rep.raw_image_bits,
        "image_unit_bits": rep.image_unit_bits,
        "raw_audio_bits": rep.raw_audio_bits,
        "mel_bits": rep.mel_bits,
        "speech_unit_bits_prededup": rep.speech_unit_bits_prededup,
        "speech_unit_bits_postdedup": rep.speech_unit_bits_postdedup,
        "image_ratio": f"{rep.image_ratio.numerator}/{rep.image_ratio.denominator}",
        "speech_ratio_vs_raw": f"{rep.speech_ratio_vs_raw.numerator}/{rep.speech_ratio_vs_raw.denominator}",
        "speech_ratio_vs_mel": f"{rep.speech_ratio_vs_mel.numerator}/{rep.speech_ratio_vs_mel.denominator}",
        "image_ratio_pct": _pct(rep.image_ratio),
        "speech_ratio_vs_raw_pct": _pct(rep.speech_ratio_vs_raw),
        "speech_ratio_vs_mel_pct": _pct(rep.speech_ratio_vs_mel),
    }
    lines += [f"{key}={value}" for key, value in kv.items()]
    return "\n".join(lines)
