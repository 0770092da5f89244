"""Discrete-unit image-to-speech captioning toolkit.

Continuous speech-style features are quantized into deduplicated discrete
units, images are tokenized into patch-level image units, and a single
autoregressive decoder translates image units into speech units, with
transfer initialization from an image-to-text model. Bit accounting and
caption metrics round out the pipeline.
"""

from .bits import BitsReport, bits_image_units, bits_mel, bits_raw_audio, bits_raw_image, bits_speech_units, report
from .core import (
    Codebook,
    DataFormatError,
    FeatureSequence,
    UnitSequence,
    dedup,
    read_codebook,
    read_units,
    token_bit_width,
    write_codebook,
    write_units,
)
from .datagen import Corpus, CorpusItem, gen_corpus, split
from .image_units import (
    Image,
    PatchGrid,
    PatchQuantizer,
    decode_image,
    encode_image,
    fit_image_codebook,
    patchify,
    read_ppm,
    write_ppm,
)
from .metrics import EvalPair, MetricReport, bleu4, cider, rouge_l, score_corpus
from .model import (
    DivergenceError,
    GenerationResult,
    ModelConfig,
    TrainHyper,
    UnitDecoder,
    forward_loss,
    generate,
    gradients,
    init_random,
    init_transfer,
    load_checkpoint,
    next_unit_accuracy,
    pretrain_text,
    save_checkpoint,
    train,
)
from .quantizer import UnitKMeans, assign, encode_speech, kmeans_fit, read_features, unit_rate, write_features

__version__ = "0.1.0"
