"""Text encoders: hashed tokenizer, toy transformer / CNN backbones, and an
adapter seam for binding an external pretrained model.

Every backbone maps a text to per-layer token representations, one pooled
vector per layer, and a binary-class probability from a sigmoid head. The
pooled vector of the final layer is the representation the mixing and
adversarial machinery consumes.
"""
from __future__ import annotations

import abc
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import nn

TOY_TRANSFORMER = "toy-transformer"
TOY_CNN = "toy-cnn"
EXTERNAL_ADAPTER = "external-adapter"
BACKBONES = (TOY_TRANSFORMER, TOY_CNN, EXTERNAL_ADAPTER)

# Convolution recipe: three parallel widths, 100 filters each, max-over-time.
CNN_WIDTHS = (2, 4, 5)
CNN_FILTERS = 100

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)
PAD_ID = 0


class EncoderError(ValueError):
    """Invalid encoder configuration or input."""


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = TOY_TRANSFORMER
    dim: int = 64
    num_layers: int = 2
    vocab_hash_size: int = 4096
    seed: int = 0
    hash_seed: int = 0
    max_len: int = 128

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise EncoderError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.dim < 2:
            raise EncoderError(f"dim must be >= 2, got {self.dim}")
        if self.num_layers < 1:
            raise EncoderError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.vocab_hash_size < 2:
            raise EncoderError(f"vocab_hash_size must be >= 2, got {self.vocab_hash_size}")
        if self.max_len < 1:
            raise EncoderError(f"max_len must be >= 1, got {self.max_len}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "dim": self.dim,
            "num_layers": self.num_layers,
            "vocab_hash_size": self.vocab_hash_size,
            "seed": self.seed,
            "hash_seed": self.hash_seed,
            "max_len": self.max_len,
        }


def tokenize(text: str, vocab_hash_size: int, hash_seed: int = 0, max_len: int = 128) -> list[int]:
    """Lowercased word split hashed into ``[1, vocab_hash_size)`` buckets.

    Id 0 is reserved for padding. The tail beyond ``max_len`` tokens is
    truncated.
    """
    ids = []
    for token in _TOKEN_RE.findall(text.lower()):
        h = hashlib.blake2b(digest_size=8)
        h.update(str(hash_seed).encode("utf-8"))
        h.update(b"\x1f")
        h.update(token.encode("utf-8"))
        bucket = int.from_bytes(h.digest(), "little") % (vocab_hash_size - 1)
        ids.append(bucket + 1)
        if len(ids) >= max_len:
            break
    return ids


@dataclass
class EncoderOutput:
    """Single-example encoder result."""

    layer_reps: list[torch.Tensor]  # num_layers entries of shape (L, d)
    pooled: torch.Tensor  # (d,)
    prob: torch.Tensor  # scalar in (0, 1)


@dataclass
class BatchEncoding:
    """Batched encoder result used by the training loops."""

    layer_pooled: list[torch.Tensor]  # num_layers entries of shape (B, d)
    pooled: torch.Tensor  # (B, d), same as layer_pooled[-1]
    probs: torch.Tensor  # (B,)


def _pad_batch(token_ids: Sequence[Sequence[int]], device=None) -> tuple[torch.Tensor, torch.Tensor]:
    max_len = max(len(ids) for ids in token_ids)
    batch = torch.full((len(token_ids), max_len), PAD_ID, dtype=torch.long, device=device)
    for i, ids in enumerate(token_ids):
        batch[i, : len(ids)] = torch.tensor(ids, dtype=torch.long, device=device)
    mask = batch.ne(PAD_ID)
    return batch, mask


def _sinusoidal_positions(max_len: int, dim: int) -> torch.Tensor:
    half = (dim + 1) // 2
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(half, dtype=torch.float32) * (-math.log(10000.0) / max(half, 1)))
    pe = torch.zeros(max_len, 2 * half)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)
    return pe[:, :dim]


class _TransformerBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, 2 * dim)
        self.ff2 = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        scores = self.q(x) @ self.k(x).transpose(1, 2) / math.sqrt(x.shape[-1])
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ self.v(x)
        x = self.norm1(x + self.o(attended))
        return self.norm2(x + self.ff2(torch.relu(self.ff1(x))))


class _ConvBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(dim, CNN_FILTERS, width) for width in CNN_WIDTHS)
        self.proj = nn.Linear(CNN_FILTERS * len(CNN_WIDTHS), dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = x.transpose(1, 2)  # (B, d, L)
        feats = []
        for conv, width in zip(self.convs, CNN_WIDTHS):
            # length-preserving pad; even widths pad one extra on the right
            padded = nn.functional.pad(h, ((width - 1) // 2, width // 2))
            feats.append(torch.relu(conv(padded)))
        return self.proj(torch.cat(feats, dim=1).transpose(1, 2))


class TextEncoder(nn.Module, abc.ABC):
    """Shared surface of all backbones: encode, per-layer taps, sigmoid head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config

    @abc.abstractmethod
    def layer_states(self, batch: torch.Tensor, mask: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer token representations, ``num_layers`` tensors (B, L, d)."""

    @abc.abstractmethod
    def pool(self, state: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Backbone-designated pooling of one layer state, (B, L, d) -> (B, d)."""

    def tokenize(self, text: str) -> list[int]:
        return tokenize(
            text, self.config.vocab_hash_size, self.config.hash_seed, self.config.max_len
        )

    def forward(self, batch: torch.Tensor, mask: torch.Tensor) -> BatchEncoding:
        states = self.layer_states(batch, mask)
        layer_pooled = [self.pool(s, mask) for s in states]
        pooled = layer_pooled[-1]
        probs = torch.sigmoid(self.head(pooled).squeeze(-1))
        return BatchEncoding(layer_pooled=layer_pooled, pooled=pooled, probs=probs)

    def encode_batch(self, texts: Sequence[str]) -> BatchEncoding:
        token_ids = [self.tokenize(t) for t in texts]
        for t, ids in zip(texts, token_ids):
            if not ids:
                raise EncoderError(f"text produced no tokens: {t!r}")
        device = next(self.parameters()).device
        batch, mask = _pad_batch(token_ids, device=device)
        return self.forward(batch, mask)

    def encode(self, text: str) -> EncoderOutput:
        ids = self.tokenize(text)
        if not ids:
            raise EncoderError(f"text produced no tokens: {text!r}")
        device = next(self.parameters()).device
        batch, mask = _pad_batch([ids], device=device)
        states = self.layer_states(batch, mask)
        pooled = self.pool(states[-1], mask)[0]
        prob = torch.sigmoid(self.head(pooled).squeeze(-1))
        return EncoderOutput(layer_reps=[s[0] for s in states], pooled=pooled, prob=prob)

    def layer_pooled(self, texts: Sequence[str], layer_index: int) -> torch.Tensor:
        """Pooled representation at a 1-indexed intermediate layer, (B, d)."""
        self._check_layer_index(layer_index)
        token_ids = [self.tokenize(t) for t in texts]
        if any(not ids for ids in token_ids):
            raise EncoderError("batch contains a text with no tokens")
        device = next(self.parameters()).device
        batch, mask = _pad_batch(token_ids, device=device)
        states = self.layer_states(batch, mask)
        return self.pool(states[layer_index - 1], mask)

    def _check_layer_index(self, layer_index: int) -> None:
        if not 1 <= layer_index <= self.config.num_layers:
            raise EncoderError(
                f"layer_index {layer_index} out of range; valid range is 1..{self.config.num_layers}"
            )

    def init_parameters(self, seed: int | None = None) -> None:
        """Seeded re-initialization: symmetric uniform scaled by fan-in.

        LayerNorm weights start at one, all biases at zero, and the
        classification head at exactly zero so a fresh model outputs 0.5.
        Re-initializing from the config seed makes the initial state a pure
        function of (config, seed) regardless of construction-time RNG.
        """
        gen = torch.Generator().manual_seed(self.config.seed if seed is None else seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.startswith("head."):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0) if name.endswith("weight") else p.zero_()
                elif p.dim() >= 2:
                    fan_in = p.shape[1] * math.prod(p.shape[2:])
                    bound = 1.0 / math.sqrt(fan_in)
                    p.uniform_(-bound, bound, generator=gen)
                else:
                    p.zero_()
        self._post_init()

    def _post_init(self) -> None:
        pass


class ToyTransformerEncoder(TextEncoder):
    """Small from-scratch transformer; the first token position is pooled."""

    def __init__(self, config: EncoderConfig):
        super().__init__(config)
        self.embedding = nn.Embedding(config.vocab_hash_size, config.dim, padding_idx=PAD_ID)
        self.register_buffer("positions", _sinusoidal_positions(config.max_len, config.dim))
        self.blocks = nn.ModuleList(_TransformerBlock(config.dim) for _ in range(config.num_layers))
        self.head = nn.Linear(config.dim, 1)
        self.init_parameters()

    def _post_init(self) -> None:
        with torch.no_grad():
            self.embedding.weight[PAD_ID].zero_()

    def layer_states(self, batch: torch.Tensor, mask: torch.Tensor) -> list[torch.Tensor]:
        x = self.embedding(batch) + self.positions[: batch.shape[1]].to(batch.device)
        states = []
        for block in self.blocks:
            x = block(x, mask)
            states.append(x)
        return states

    def pool(self, state: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return state[:, 0, :]


class ToyCnnEncoder(TextEncoder):
    """Stacked convolution blocks pooled by masked max-over-time."""

    def __init__(self, config: EncoderConfig):
        super().__init__(config)
        self.embedding = nn.Embedding(config.vocab_hash_size, config.dim, padding_idx=PAD_ID)
        self.blocks = nn.ModuleList(_ConvBlock(config.dim) for _ in range(config.num_layers))
        self.head = nn.Linear(config.dim, 1)
        self.init_parameters()

    def _post_init(self) -> None:
        with torch.no_grad():
            self.embedding.weight[PAD_ID].zero_()

    def layer_states(self, batch: torch.Tensor, mask: torch.Tensor) -> list[torch.Tensor]:
        x = self.embedding(batch)
        states = []
        for block in self.blocks:
            x = block(x, mask)
            states.append(x)
        return states

    def pool(self, state: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        masked = state.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        return masked.max(dim=1).values


class ExternalEncoderAdapter(TextEncoder):
    """Binding point for a real pretrained encoder.

    Implementations must provide the same contract as the toy backbones:
    ``layer_states`` with ``num_layers`` taps, a designated ``pool``, a
    ``head`` producing one logit, and trainable parameters enumerable via
    ``parameters()``. No binding ships with the package.
    """


_EXTERNAL_FACTORY: Callable[[EncoderConfig], TextEncoder] | None = None


def register_external_backbone(factory: Callable[[EncoderConfig], TextEncoder] | None) -> None:
    """Install (or clear, with None) the external-adapter factory."""
    global _EXTERNAL_FACTORY
    _EXTERNAL_FACTORY = factory


def build_encoder(config: EncoderConfig) -> TextEncoder:
    if config.backbone == TOY_TRANSFORMER:
        return ToyTransformerEncoder(config)
    if config.backbone == TOY_CNN:
        return ToyCnnEncoder(config)
    if _EXTERNAL_FACTORY is None:
        raise EncoderError(
            "backbone 'external-adapter' requires register_external_backbone(factory) first"
        )
    return _EXTERNAL_FACTORY(config)


def layer_representation(encoder: TextEncoder, text: str, layer_index: int) -> torch.Tensor:
    """Pooled representation of one text at a 1-indexed layer; grads flow."""
    return encoder.layer_pooled([text], layer_index)[0]
