"""Adapter <-> fixed-size weight tokens.

Each factor pair is flattened (B row-major, then A row-major), standardized
with its own mean/std, sliced into tokens of ``k`` elements and zero-padded
at the end of the layer. Every token carries a sinusoidal annotation of
(layer index, intra-layer offset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .lora import LoraAdapter, LoraFactor

STD_FLOOR = 1e-8


class LayoutError(ValueError):
    """Token sequence does not agree with its declared layout."""


@dataclass(frozen=True)
class LayerRecord:
    layer_id: str
    b_shape: tuple[int, int]
    a_shape: tuple[int, int]
    token_start: int
    token_span: int
    pad_len: int
    mean: float = 0.0
    std: float = 1.0

    @property
    def element_count(self) -> int:
        return self.b_shape[0] * self.b_shape[1] + self.a_shape[0] * self.a_shape[1]


@dataclass(frozen=True)
class TokenLayout:
    records: tuple[LayerRecord, ...]
    k: int
    pos_dim: int = 16

    @property
    def n_tokens(self) -> int:
        return sum(r.token_span for r in self.records)

    @property
    def rank(self) -> int:
        return self.records[0].b_shape[1]

    def structure(self) -> tuple:
        """Everything except the normalization stats."""
        return (self.k, self.pos_dim) + tuple((r.layer_id, r.b_shape, r.a_shape) for r in self.records)

    def with_stats(self, means, stds) -> "TokenLayout":
        recs = tuple(replace(r, mean=float(m), std=max(float(s), STD_FLOOR)) for r, m, s in zip(self.records, means, stds))
        return replace(self, records=recs)

    def pad_mask(self) -> np.ndarray:
        """(n_tokens, k) boolean; True marks padding."""
        mask = np.zeros((self.n_tokens, self.k), dtype=bool)
        for r in self.records:
            if r.pad_len:
                mask[r.token_start + r.token_span - 1, self.k - r.pad_len :] = True
        return mask

    def token_index(self) -> tuple[np.ndarray, np.ndarray]:
        layer = np.concatenate([np.full(r.token_span, i) for i, r in enumerate(self.records)])
        offset = np.concatenate([np.arange(r.token_span) for r in self.records])
        return layer, offset

    def positions(self) -> np.ndarray:
        layer, offset = self.token_index()
        return np.stack([positional_annotation(l, o, self.pos_dim) for l, o in zip(layer, offset)])

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "pos_dim": self.pos_dim,
            "records": [
                {
                    "layer_id": r.layer_id,
                    "b_shape": list(r.b_shape),
                    "a_shape": list(r.a_shape),
                    "token_start": r.token_start,
                    "token_span": r.token_span,
                    "pad_len": r.pad_len,
                    "mean": r.mean,
                    "std": r.std,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenLayout":
        recs = tuple(
            LayerRecord(
                r["layer_id"], tuple(r["b_shape"]), tuple(r["a_shape"]), r["token_start"], r["token_span"], r["pad_len"], r["mean"], r["std"]
            )
            for r in d["records"]
        )
        return cls(recs, d["k"], d["pos_dim"])


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (T, k)
    positions: np.ndarray  # (T, pos_dim)
    pad_mask: np.ndarray  # (T, k), True = padding
    layout: TokenLayout

    def __len__(self) -> int:
        return self.tokens.shape[0]


def positional_annotation(layer_index: int, offset: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of (layer index, offset).

    Pairs alternate between the two coordinates; within each coordinate the
    frequencies follow the usual geometric ladder.
    """
    if dim <= 0 or dim % 2:
        raise nx.ConfigError(f"positional annotation dim must be a positive even number, got {dim}")
    pairs = dim // 2
    n_layer = (pairs + 1) // 2
    n_off = max(pairs // 2, 1)
    out = np.empty(dim, dtype=np.float64)
    for p in range(pairs):
        rung = p // 2
        if p % 2 == 0:
            val, n = layer_index, n_layer
        else:
            val, n = offset, n_off
        freq = 1.0 / (100.0 ** (rung / n))
        out[2 * p] = math.sin(val * freq)
        out[2 * p + 1] = math.cos(val * freq)
    return out


def make_layout(adapter: LoraAdapter, k: int, pos_dim: int = 16) -> TokenLayout:
    if k < 1:
        raise nx.ConfigError(f"token size must be >= 1, got {k}")
    if not adapter.factors:
        raise ValueError("cannot tokenize an empty adapter")
    recs = []
    start = 0
    for f in adapter.factors:
        n = f.size
        span = -(-n // k)
        recs.append(LayerRecord(f.layer_id, f.B.shape, f.A.shape, start, span, span * k - n))
        start += span
    return TokenLayout(tuple(recs), k, pos_dim)


def tokenize(adapter: LoraAdapter, k: int, pos_dim: int = 16) -> TokenSequence:
    layout = make_layout(adapter, k, pos_dim)
    rows = []
    means, stds = [], []
    for f in adapter.factors:
        flat = np.concatenate([f.B.ravel(), f.A.ravel()]).astype(np.float64)
        mu = float(flat.mean())
        sd = max(float(flat.std()), STD_FLOOR)
        z = (flat - mu) / sd
        padded = np.zeros(-(-z.size // k) * k)
        padded[: z.size] = z
        rows.append(padded.reshape(-1, k))
        means.append(mu)
        stds.append(sd)
    layout = layout.with_stats(means, stds)
    # float64 keeps the round trip exact for float32 factors
    tokens = np.concatenate(rows)
    return TokenSequence(tokens, layout.positions(), layout.pad_mask(), layout)


def detokenize(seq: TokenSequence, provenance="generated") -> LoraAdapter:
    layout = seq.layout
    tokens = np.asarray(seq.tokens)
    if tokens.shape != (layout.n_tokens, layout.k):
        raise LayoutError(f"token array {tokens.shape} does not match layout ({layout.n_tokens}, {layout.k})")
    if nx.is_checked() and np.any(tokens[layout.pad_mask()] != 0):
        raise LayoutError("padding elements must be exactly zero")
    factors = []
    for r in layout.records:
        flat = tokens[r.token_start : r.token_start + r.token_span].astype(np.float64).ravel()[: r.element_count]
        flat = flat * r.std + r.mean
        nb = r.b_shape[0] * r.b_shape[1]
        B = flat[:nb].reshape(r.b_shape).astype(np.float32)
        A = flat[nb:].reshape(r.a_shape).astype(np.float32)
        factors.append(LoraFactor(r.layer_id, B, A))
    return LoraAdapter(tuple(factors), provenance)


def layout_template(layouts: list[TokenLayout]) -> TokenLayout:
    """Average normalization stats over layouts that share one structure."""
    first = layouts[0]
    for lay in layouts[1:]:
        if lay.structure() != first.structure():
            raise LayoutError("cannot average layouts with different structure")
    means = np.mean([[r.mean for r in lay.records] for lay in layouts], axis=0)
    stds = np.mean([[r.std for r in lay.records] for lay in layouts], axis=0)
    return first.with_stats(means, stds)
