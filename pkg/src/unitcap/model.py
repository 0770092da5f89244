"""Autoregressive unit decoder conditioned on an image-unit prefix.

A single decoder-only transformer stack processes the sequence

    [image-unit embeddings] ++ [BOS] ++ [output-token embeddings]

where the image prefix attends bidirectionally among itself, the output
segment attends causally, and every position can see the whole prefix.
Image units enter through an embedding table plus additive row/column
positional embeddings (the input-adaptation layer for tokenized images);
output tokens use a learned 1-D positional table. The loss is the mean
negative log-likelihood of the next output token over all target
positions, EOS included, PAD excluded.

Transfer initialization copies the transformer trunk, the image-unit
embedding path, and the positional tables from a text-task model, while
the output-token embedding and projection are re-initialized for the unit
vocabulary. The image-unit embedding path is frozen afterwards; only the
decoder trunk and the unit embedding layers train.

Everything computes in float64 on CPU so gradient checks against central
finite differences are meaningful, and all randomness flows through
explicit seeds: one seed gives one bit-identical parameter set and loss
trace on a given platform.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import DataFormatError, UnitSequence
from .image_units import PatchGrid

__all__ = [
    "ModelConfig",
    "FULL_SCALE_PROFILE",
    "UnitDecoder",
    "TrainHyper",
    "warmup_factor",
    "DivergenceError",
    "init_random",
    "init_transfer",
    "forward_loss",
    "batch_loss",
    "gradients",
    "train",
    "pretrain_text",
    "generate",
    "GenerationResult",
    "next_unit_accuracy",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"UCKP"
CHECKPOINT_VERSION = 1

# Full-scale reference constants for the complete system (recorded for
# documentation; the desk-scale defaults below are what this package runs).
FULL_SCALE_PROFILE = {
    "decoder_layers": 6,
    "image_size": 224,
    "vit_patch_size": 14,
    "image_unit_patch_size": 8,
    "image_unit_vocab": 8192,
    "speech_unit_vocab": 200,
    "learning_rate": 5e-5,
    "warmup_steps": 10_000,
    "train_steps": 100_000,
    "batch_size": 64,
}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    max_grid_h: int = 8
    max_grid_w: int = 8
    max_unit_len: int = 64
    unit_vocab: int = 32
    text_vocab: int = 30
    image_unit_vocab: int = 64
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        for name in ("d_model", "n_layers", "n_heads", "ff_dim", "max_grid_h",
                     "max_grid_w", "max_unit_len", "unit_vocab", "text_vocab",
                     "image_unit_vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def max_image_tokens(self) -> int:
        return self.max_grid_h * self.max_grid_w


class _Block(nn.Module):
    """Pre-norm transformer block: x + attn(LN(x)), then x + ff(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.ln_attn = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        self.ln_ff = nn.LayerNorm(d_model)
        self.ff_in = nn.Linear(d_model, ff_dim)
        self.ff_out = nn.Linear(ff_dim, d_model)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        q = q.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        scores = scores + attn_mask
        attn = torch.softmax(scores, dim=-1)
        if self.dropout > 0.0 and self.training:
            attn = torch.nn.functional.dropout(attn, p=self.dropout)
        out = torch.matmul(attn, v).transpose(1, 2).reshape(b, length, d)
        x = x + self.attn_out(out)
        h = self.ln_ff(x)
        h = self.ff_out(torch.nn.functional.gelu(self.ff_in(h)))
        if self.dropout > 0.0 and self.training:
            h = torch.nn.functional.dropout(h, p=self.dropout)
        return x + h


class UnitDecoder(nn.Module):
    """Prefix-conditioned decoder for either speech-unit or text targets.

    ``task`` selects the output vocabulary (``unit_vocab`` or
    ``text_vocab``); BOS/EOS/PAD occupy the last three output ids.
    """

    def __init__(self, config: ModelConfig, task: str = "units"):
        super().__init__()
        if task not in ("units", "text"):
            raise ValueError(f"task must be 'units' or 'text', got {task!r}")
        self.config = config
        self.task = task
        self.out_vocab = config.unit_vocab if task == "units" else config.text_vocab
        self.bos_id = self.out_vocab
        self.eos_id = self.out_vocab + 1
        self.pad_id = self.out_vocab + 2
        d = config.d_model
        self.image_embed = nn.Embedding(config.image_unit_vocab, d)
        self.row_pos = nn.Parameter(torch.zeros(config.max_grid_h, d))
        self.col_pos = nn.Parameter(torch.zeros(config.max_grid_w, d))
        self.out_embed = nn.Embedding(self.out_vocab + 3, d)
        self.out_pos = nn.Parameter(torch.zeros(config.max_unit_len + 1, d))
        self.blocks = nn.ModuleList(
            _Block(d, config.n_heads, config.ff_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, self.out_vocab + 3)
        self.frozen_params: tuple[str, ...] = ()
        self.to(DTYPE)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def _init_params(model: UnitDecoder, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    d_model = model.config.d_model

    def uniform_(tensor: torch.Tensor, fan_in: int) -> None:
        bound = math.sqrt(1.0 / fan_in)
        with torch.no_grad():
            # draw on CPU float64 through the explicit generator only
            tensor.copy_(
                torch.empty(tensor.shape, dtype=DTYPE).uniform_(-bound, bound, generator=gen)
            )

    for module in model.modules():
        if isinstance(module, nn.Linear):
            uniform_(module.weight, module.in_features)
            with torch.no_grad():
                module.bias.zero_()
        elif isinstance(module, nn.Embedding):
            uniform_(module.weight, d_model)
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    for pos in (model.row_pos, model.col_pos, model.out_pos):
        uniform_(pos, d_model)


def init_random(config: ModelConfig, seed: int | None = None, task: str = "units") -> UnitDecoder:
    """Fresh model with scaled-uniform weights, unit norm gains, zero biases."""
    model = UnitDecoder(config, task=task)
    _init_params(model, config.seed if seed is None else seed)
    return model


_STRUCTURAL_FIELDS = (
    "d_model", "n_layers", "n_heads", "ff_dim", "max_grid_h", "max_grid_w",
    "max_unit_len", "image_unit_vocab",
)


def init_transfer(pretrained: UnitDecoder, config: ModelConfig, seed: int = 0) -> UnitDecoder:
    """Build a unit-task model initialized from a text-task model.

    Transformer blocks, final norm, the image-unit embedding path, and both
    positional tables are copied; the output-token embedding and projection
    are re-initialized for the unit vocabulary. The image-unit embedding
    path is then frozen (requires_grad False), so optimizers built from
    ``trainable_parameters`` leave it untouched.
    """
    if pretrained.task != "text":
        raise ValueError("transfer source must be a text-task model")
    for name in _STRUCTURAL_FIELDS:
        if getattr(pretrained.config, name) != getattr(config, name):
            raise ValueError(
                f"dimension mismatch on {name}: "
                f"{getattr(pretrained.config, name)} != {getattr(config, name)}"
            )
    model = init_random(config, seed=seed, task="units")
    with torch.no_grad():
        model.image_embed.weight.copy_(pretrained.image_embed.weight)
        model.row_pos.copy_(pretrained.row_pos)
        model.col_pos.copy_(pretrained.col_pos)
        model.out_pos.copy_(pretrained.out_pos)
        model.blocks.load_state_dict(pretrained.blocks.state_dict())
        model.final_norm.load_state_dict(pretrained.final_norm.state_dict())
    frozen = ("image_embed.weight", "row_pos", "col_pos")
    params = dict(model.named_parameters())
    for name in frozen:
        params[name].requires_grad_(False)
    model.frozen_params = frozen
    return model


def _coerce_grid(model: UnitDecoder, grid, grid_shape=None) -> tuple[np.ndarray, tuple[int, int]]:
    cfg = model.config
    if isinstance(grid, PatchGrid):
        if grid.codebook_size > cfg.image_unit_vocab:
            raise ValueError(
                f"grid vocabulary {grid.codebook_size} exceeds model's {cfg.image_unit_vocab}"
            )
        return grid.units.reshape(-1).astype(np.int64), (grid.grid_h, grid.grid_w)
    if isinstance(grid, UnitSequence):
        tokens = grid.to_array()
    else:
        tokens = np.asarray(grid, dtype=np.int64).reshape(-1)
    if grid_shape is None:
        if tokens.size != cfg.max_image_tokens:
            raise ValueError(
                "grid_shape required when the token count differs from "
                f"max_grid_h*max_grid_w = {cfg.max_image_tokens}"
            )
        grid_shape = (cfg.max_grid_h, cfg.max_grid_w)
    gh, gw = grid_shape
    if gh * gw != tokens.size:
        raise ValueError(f"grid shape {grid_shape} does not match {tokens.size} tokens")
    return tokens, (gh, gw)


def _validate_tokens(tokens: np.ndarray, vocab: int, what: str) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"{what} token out of range [0, {vocab})")


def _prefix_states(model: UnitDecoder, grids: torch.Tensor, gh: int, gw: int) -> torch.Tensor:
    cfg = model.config
    if gh > cfg.max_grid_h or gw > cfg.max_grid_w:
        raise ValueError(f"grid {gh}x{gw} exceeds maxima {cfg.max_grid_h}x{cfg.max_grid_w}")
    g = gh * gw
    idx = torch.arange(g)
    rows = idx // gw
    cols = idx % gw
    return model.image_embed(grids) + model.row_pos[rows] + model.col_pos[cols]


def _attn_mask(prefix_len: int, total_len: int) -> torch.Tensor:
    q = torch.arange(total_len).unsqueeze(1)
    k = torch.arange(total_len).unsqueeze(0)
    allowed = (k < prefix_len) | (k <= q)
    mask = torch.zeros(total_len, total_len, dtype=DTYPE)
    mask.masked_fill_(~allowed, float("-inf"))
    return mask


def _forward_logits(
    model: UnitDecoder,
    grids: torch.Tensor,
    gh: int,
    gw: int,
    out_tokens: torch.Tensor,
) -> torch.Tensor:
    """Logits over the output segment; out_tokens is [BOS, u_1, ..] per row."""
    prefix = _prefix_states(model, grids, gh, gw)
    s_plus = out_tokens.shape[1]
    if s_plus > model.config.max_unit_len + 1:
        raise ValueError(
            f"output segment {s_plus} exceeds max_unit_len+1 = {model.config.max_unit_len + 1}"
        )
    out = model.out_embed(out_tokens) + model.out_pos[:s_plus]
    x = torch.cat([prefix, out], dim=1)
    mask = _attn_mask(prefix.shape[1], x.shape[1])
    for block in model.blocks:
        x = block(x, mask)
    x = model.final_norm(x)
    return model.head(x[:, prefix.shape[1]:, :])


def _prepare_batch(model: UnitDecoder, corpus, grid_shape=None):
    grids = []
    shape = None
    targets = []
    for grid, target in corpus:
        tokens, gs = _coerce_grid(model, grid, grid_shape)
        if shape is None:
            shape = gs
        elif gs != shape:
            raise ValueError(f"mixed grid shapes in one batch: {shape} vs {gs}")
        _validate_tokens(tokens, model.config.image_unit_vocab, "image")
        grids.append(tokens)
        t = target.to_array() if isinstance(target, UnitSequence) else np.asarray(target, dtype=np.int64).reshape(-1)
        _validate_tokens(t, model.out_vocab, "target")
        if t.size > model.config.max_unit_len:
            raise ValueError(f"target length {t.size} exceeds max_unit_len {model.config.max_unit_len}")
        targets.append(t)
    gh, gw = shape
    grid_tensor = torch.from_numpy(np.stack(grids))
    s_max = max((t.size for t in targets), default=0)
    b = len(targets)
    inputs = torch.full((b, s_max + 1), model.pad_id, dtype=torch.long)
    next_tokens = torch.full((b, s_max + 1), model.pad_id, dtype=torch.long)
    mask = torch.zeros(b, s_max + 1, dtype=torch.bool)
    inputs[:, 0] = model.bos_id
    for i, t in enumerate(targets):
        n = t.size
        if n:
            tt = torch.from_numpy(t)
            inputs[i, 1 : n + 1] = tt
            next_tokens[i, :n] = tt
        next_tokens[i, n] = model.eos_id
        mask[i, : n + 1] = True
    return grid_tensor, gh, gw, inputs, next_tokens, mask


def batch_loss(model: UnitDecoder, corpus, grid_shape=None):
    """Mean next-token NLL over all unpadded target positions of a batch."""
    if not corpus:
        raise ValueError("batch must be nonempty")
    grid_tensor, gh, gw, inputs, next_tokens, mask = _prepare_batch(model, corpus, grid_shape)
    logits = _forward_logits(model, grid_tensor, gh, gw, inputs)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, next_tokens.unsqueeze(-1)).squeeze(-1)
    loss = (nll * mask).sum() / mask.sum()
    return loss, logits


def forward_loss(model: UnitDecoder, grid_tokens, target_units, grid_shape=None):
    """Single-example loss and logits.

    The loss is the mean over the example's S+1 target positions (its S
    units followed by EOS) of the negative log-probability assigned to the
    true next token.
    """
    loss, logits = batch_loss(model, [(grid_tokens, target_units)], grid_shape)
    return loss, logits[0]


def gradients(model: UnitDecoder, corpus, grid_shape=None) -> dict[str, torch.Tensor]:
    """Gradient of the batch mean loss per named tensor; zeros for frozen tensors."""
    model.zero_grad(set_to_none=True)
    loss, _ = batch_loss(model, corpus, grid_shape)
    loss.backward()
    out = {}
    for name, p in model.named_parameters():
        out[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    model.zero_grad(set_to_none=True)
    return out


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    warmup_steps: int = 20
    steps: int = 400
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0 or self.warmup_steps < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError(f"invalid hyperparameters: {self}")


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Learning-rate multiplier at 0-based ``step``: linear ramp, then 1.

    The ramp reaches the peak rate exactly at the ``warmup_steps``-th update.
    """
    return min(1.0, (step + 1) / warmup_steps) if warmup_steps > 0 else 1.0


def train(model: UnitDecoder, corpus, hyper: TrainHyper, grid_shape=None):
    """Adam with a linear warmup to a constant rate; returns the loss trace.

    Batches are drawn by seeded epoch shuffles, losses reduce in index
    order, and optimizer state starts fresh, so a fixed seed reproduces the
    trace exactly. A non-finite loss aborts with :class:`DivergenceError`.
    """
    if not corpus:
        raise ValueError("training corpus must be nonempty")
    torch.manual_seed(hyper.seed)  # covers dropout when configured on
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=hyper.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: warmup_factor(step, hyper.warmup_steps)
    )
    gen = torch.Generator().manual_seed(hyper.seed)
    order: list[int] = []
    trace = []
    for step in range(hyper.steps):
        while len(order) < hyper.batch_size:
            order.extend(torch.randperm(len(corpus), generator=gen).tolist())
        batch_idx, order = order[: hyper.batch_size], order[hyper.batch_size :]
        batch = [corpus[i] for i in batch_idx]
        loss, _ = batch_loss(model, batch, grid_shape)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss.item()!r} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        trace.append(float(loss.detach()))
    return model, np.asarray(trace)


def pretrain_text(model: UnitDecoder, corpus, hyper: TrainHyper, grid_shape=None):
    """Image-to-text pretraining: the same machinery as :func:`train`."""
    if model.task != "text":
        raise ValueError("pretrain_text requires a text-task model")
    return train(model, corpus, hyper, grid_shape)


@dataclass(frozen=True)
class GenerationResult:
    units: UnitSequence
    reached_eos: bool
    score: float


def generate(
    model: UnitDecoder,
    grid_tokens,
    max_len: int | None = None,
    beam_size: int = 1,
    grid_shape=None,
) -> GenerationResult:
    """Decode from BOS until EOS or ``max_len`` units.

    Hypotheses are ranked by length-normalized summed log-probability (the
    EOS term counts for finished hypotheses); ties break toward the lower
    token sequence. ``beam_size=1`` is greedy decoding by construction.
    ``reached_eos`` is False when the best hypothesis hit ``max_len``.
    """
    cfg = model.config
    if max_len is None:
        max_len = cfg.max_unit_len
    if max_len < 1 or max_len > cfg.max_unit_len:
        raise ValueError(f"max_len must be in [1, {cfg.max_unit_len}], got {max_len}")
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    tokens, (gh, gw) = _coerce_grid(model, grid_tokens, grid_shape)
    _validate_tokens(tokens, cfg.image_unit_vocab, "image")
    grid_row = torch.from_numpy(tokens).unsqueeze(0)

    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    completed: list[tuple[float, tuple[int, ...]]] = []  # (normalized score, tokens)
    with torch.no_grad():
        for _ in range(max_len):
            b = len(live)
            inputs = torch.full((b, len(live[0][0]) + 1), model.bos_id, dtype=torch.long)
            for i, (toks, _) in enumerate(live):
                if toks:
                    inputs[i, 1:] = torch.tensor(toks, dtype=torch.long)
            logits = _forward_logits(model, grid_row.expand(b, -1), gh, gw, inputs)
            logp = torch.log_softmax(logits[:, -1, :], dim=-1)
            logp[:, model.bos_id] = float("-inf")
            logp[:, model.pad_id] = float("-inf")
            candidates: list[tuple[float, tuple[int, ...]]] = []
            for i, (toks, total) in enumerate(live):
                row = logp[i]
                eos_total = total + float(row[model.eos_id])
                completed.append((eos_total / (len(toks) + 1), toks))
                for tok in range(model.out_vocab):
                    candidates.append((total + float(row[tok]), toks + (tok,)))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            live = [(toks, total) for total, toks in candidates[:beam_size]]
        overflow = [(total / max_len, toks) for toks, total in live]

    pool = [(score, toks, True) for score, toks in completed]
    pool += [(score, toks, False) for score, toks in overflow]
    pool.sort(key=lambda c: (-c[0], c[1]))
    score, toks, reached_eos = pool[0]
    return GenerationResult(
        units=UnitSequence(toks, model.out_vocab),
        reached_eos=reached_eos,
        score=score,
    )


def next_unit_accuracy(model: UnitDecoder, corpus, grid_shape=None) -> float:
    """Teacher-forced next-token accuracy over all target positions (EOS included)."""
    with torch.no_grad():
        grid_tensor, gh, gw, inputs, next_tokens, mask = _prepare_batch(model, corpus, grid_shape)
        logits = _forward_logits(model, grid_tensor, gh, gw, inputs)
        pred = logits.argmax(dim=-1)
        correct = ((pred == next_tokens) & mask).sum()
        return float(correct) / float(mask.sum())


def _config_lines(model: UnitDecoder) -> str:
    cfg = model.config
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    lines.append(f"task={model.task}")
    lines.append("frozen=" + ",".join(model.frozen_params))
    return "\n".join(lines) + "\n"


def save_checkpoint(model: UnitDecoder, path) -> None:
    """Write magic, config block, then named float32 tensors."""
    blob = bytearray()
    blob += struct.pack("<4sB", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config_bytes = _config_lines(model).encode("utf-8")
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    named = list(model.named_parameters())
    blob += struct.pack("<I", len(named))
    for name, p in named:
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        dims = tuple(p.shape)
        blob += struct.pack("<B", len(dims))
        blob += struct.pack(f"<{len(dims)}I", *dims)
        blob += p.detach().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> UnitDecoder:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic, version = struct.unpack("<4sB", take(5))
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", take(4))
    config_text = bytes(take(config_len)).decode("utf-8")
    raw: dict[str, str] = {}
    for line in config_text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    try:
        kwargs = {}
        for f in fields(ModelConfig):
            kwargs[f.name] = float(raw[f.name]) if f.type == "float" else int(raw[f.name])
        config = ModelConfig(**kwargs)
        task = raw["task"]
        frozen = tuple(n for n in raw.get("frozen", "").split(",") if n)
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"bad checkpoint config: {exc}") from exc
    model = UnitDecoder(config, task=task)
    params = dict(model.named_parameters())
    (n_tensors,) = struct.unpack("<I", take(4))
    if n_tensors != len(params):
        raise DataFormatError(
            f"checkpoint has {n_tensors} tensors, model expects {len(params)}"
        )
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        if name not in params:
            raise DataFormatError(f"unknown tensor {name!r} in checkpoint")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        p = params[name]
        if tuple(p.shape) != dims:
            raise DataFormatError(f"tensor {name!r} has shape {dims}, expected {tuple(p.shape)}")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        if not np.isfinite(arr).all():
            raise DataFormatError(f"tensor {name!r} contains non-finite values")
        with torch.no_grad():
            p.copy_(torch.from_numpy(arr.astype(np.float64)))
        seen.add(name)
    if seen != set(params):
        raise DataFormatError("checkpoint is missing tensors")
    for name in frozen:
        if name not in params:
            raise DataFormatError(f"frozen tensor {name!r} not in model")
        params[name].requires_grad_(False)
    model.frozen_params = frozen
    return model
