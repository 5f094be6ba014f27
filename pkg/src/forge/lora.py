"""Low-rank adapters: factors, merging into base weights, parameter counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .basemodel import BaseModel


class StructuralCompatibilityError(ValueError):
    """Adapter does not fit the base model it is being merged into."""


@dataclass(frozen=True)
class LoraFactor:
    layer_id: str
    B: np.ndarray  # (d_out, r)
    A: np.ndarray  # (r, d_in)

    def __post_init__(self):
        if self.B.ndim != 2 or self.A.ndim != 2:
            raise ValueError(f"{self.layer_id}: factors must be matrices")
        if self.B.shape[1] != self.A.shape[0]:
            raise ValueError(f"{self.layer_id}: B is {self.B.shape}, A is {self.A.shape}; ranks disagree")
        r = self.B.shape[1]
        if r < 1:
            raise ValueError(f"{self.layer_id}: rank must be positive")
        if r > min(self.d_out, self.d_in):
            raise ValueError(f"{self.layer_id}: rank {r} exceeds min(d_out, d_in) = {min(self.d_out, self.d_in)}")

    @property
    def r(self) -> int:
        return self.B.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def size(self) -> int:
        return self.B.size + self.A.size


@dataclass(frozen=True)
class LoraAdapter:
    factors: tuple[LoraFactor, ...]
    provenance: tuple | str = "generated"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        ids = [f.layer_id for f in self.factors]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate layer ids in adapter: {ids}")
        ranks = {f.r for f in self.factors}
        if len(ranks) > 1:
            raise ValueError(f"adapter factors disagree on rank: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.factors[0].r

    @property
    def layer_ids(self) -> list[str]:
        return [f.layer_id for f in self.factors]

    def factor(self, layer_id: str) -> LoraFactor:
        for f in self.factors:
            if f.layer_id == layer_id:
                return f
        raise KeyError(layer_id)

    def num_params(self) -> int:
        return sum(f.size for f in self.factors)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for f in self.factors:
            out[f"{f.layer_id}.B"] = f.B
            out[f"{f.layer_id}.A"] = f.A
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], layer_ids: Sequence[str], provenance="generated") -> "LoraAdapter":
        return cls(tuple(LoraFactor(l, arrays[f"{l}.B"], arrays[f"{l}.A"]) for l in layer_ids), provenance)


def delta_weight(f: LoraFactor) -> np.ndarray:
    return f.B @ f.A


def canonical_factors(B: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Balanced-SVD representative of the (B, A) pairs sharing the product B A.

    B A is invariant under B -> B G, A -> G^-1 A. This picks B = U sqrt(S),
    A = sqrt(S) V^T from the thin SVD of the product, with each rank-1 pair's
    sign fixed so that sum(B[:, i]) + sum(A[i]) >= 0. Seeds that learn the same
    update then share one parameterization.
    """
    dtype = B.dtype
    B, A = B.astype(np.float64), A.astype(np.float64)
    qb, rb = np.linalg.qr(B)
    qa, ra = np.linalg.qr(A.T)
    u, s, vt = np.linalg.svd(rb @ ra.T)
    root = np.sqrt(s)
    Bc = (qb @ u) * root
    Ac = (root[:, None] * vt) @ qa.T
    sign = np.where(Bc.sum(0) + Ac.sum(1) < 0, -1.0, 1.0)
    return (Bc * sign).astype(dtype), (Ac * sign[:, None]).astype(dtype)


def canonical_adapter(adapter: LoraAdapter) -> LoraAdapter:
    return LoraAdapter(
        tuple(LoraFactor(f.layer_id, *canonical_factors(f.B, f.A)) for f in adapter.factors), adapter.provenance
    )


def align_factors(B: np.ndarray, A: np.ndarray, B_ref: np.ndarray, A_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(B Q, Q^T A) for the orthogonal Q that brings [B; A^T] closest to [B_ref; A_ref^T].

    The product B A is unchanged, and so is balance (B^T B = A A^T). This
    resolves sign flips, reorderings and rotations among near-equal singular
    values that a per-adapter rule cannot pin down.
    """
    dtype = B.dtype
    X = np.concatenate([B, A.T]).astype(np.float64)
    R = np.concatenate([B_ref, A_ref.T]).astype(np.float64)
    u, _, vt = np.linalg.svd(X.T @ R)
    Q = u @ vt
    return (X[: B.shape[0]] @ Q).astype(dtype), (Q.T @ A.astype(np.float64)).astype(dtype)


def align_adapter(adapter: LoraAdapter, reference: LoraAdapter) -> LoraAdapter:
    if adapter.layer_ids != reference.layer_ids:
        raise StructuralCompatibilityError("cannot align adapters over different layers")
    return LoraAdapter(
        tuple(LoraFactor(f.layer_id, *align_factors(f.B, f.A, g.B, g.A)) for f, g in zip(adapter.factors, reference.factors)),
        adapter.provenance,
    )


def zero_adapter(base: "BaseModel", r: int, layers: Iterable[str] | None = None) -> LoraAdapter:
    layers = list(layers) if layers is not None else base.lora_targets()
    facs = []
    for l in layers:
        d_out, d_in = base.weight(l).shape
        facs.append(LoraFactor(l, np.zeros((d_out, r), np.float32), np.zeros((r, d_in), np.float32)))
    return LoraAdapter(tuple(facs), "zero")


def merge_adapter(base: "BaseModel", adapter: LoraAdapter) -> "BaseModel":
    """Return a new model with W0 + B A added to every targeted layer."""
    layers = dict(base.layers)
    for f in adapter.factors:
        key = f"{f.layer_id}.weight"
        if key not in layers:
            raise StructuralCompatibilityError(f"base {base.version_id} has no layer {f.layer_id!r}")
        w0 = layers[key]
        if w0.shape != (f.d_out, f.d_in):
            raise StructuralCompatibilityError(
                f"layer {f.layer_id}: base weight is {w0.shape}, adapter delta is {(f.d_out, f.d_in)}"
            )
        layers[key] = (w0 + delta_weight(f)).astype(w0.dtype)
    return base.replace(layers=layers)


def lora_param_count(base: "BaseModel", target_layers: Iterable[str], r: int) -> int:
    if r < 1:
        raise ValueError("LoRA rank must be >= 1")
    total = 0
    for l in target_layers:
        d_out, d_in = base.weight(l).shape
        total += r * (d_in + d_out)
    return total
