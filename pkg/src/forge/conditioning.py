"""Global condition c = [c_model ; c_text].

Both halves come from fixed featurizers (hashed character n-grams, plus
weight statistics for base models) followed by trainable linear projections
that are optimized together with the diffusion loss.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .basemodel import BaseModel
from .tasks import TaskSpec

PROVENANCES = ("real", "random_model", "random_text")


class ConditionError(ValueError):
    pass


def hashed_ngrams(text: str, n: int = 3, buckets: int = 2048) -> np.ndarray:
    """L2-normalized counts of character n-grams hashed into ``buckets`` bins."""
    if not text:
        raise ConditionError("cannot featurize empty text")
    v = np.zeros(buckets, dtype=np.float64)
    padded = f" {text} "
    for i in range(max(len(padded) - n + 1, 1)):
        v[zlib.crc32(padded[i : i + n].encode("utf-8")) % buckets] += 1.0
    return v / np.linalg.norm(v)


def base_model_string(base: BaseModel) -> str:
    arch = base.arch
    if not arch.dims or not arch.lineage or not arch.activation:
        raise ConditionError(f"base model {base.version_id} is missing architecture metadata")
    dims = "x".join(str(d) for d in arch.dims)
    return (
        f"arch=mlp dims={dims} layers={arch.n_layers} activation={arch.activation} "
        f"version={base.version_id} lineage={'>'.join(arch.lineage)}"
    )


def weight_stats(base: BaseModel) -> np.ndarray:
    """Per linear layer: mean, std and RMS (Frobenius norm / sqrt(size)) of the weight."""
    out = []
    for name in base.linear_layers():
        w = base.weight(name).astype(np.float64)
        out += [w.mean(), w.std(), np.linalg.norm(w) / np.sqrt(w.size)]
    return np.array(out)


def base_model_features(base: BaseModel, n: int = 3, buckets: int = 2048) -> np.ndarray:
    return np.concatenate([hashed_ngrams(base_model_string(base), n, buckets), weight_stats(base)])


def task_text_features(spec: TaskSpec | str, n: int = 3, buckets: int = 2048) -> np.ndarray:
    text = spec if isinstance(spec, str) else spec.prompt_text
    if not text or not text.strip():
        raise ConditionError("task prompt text is empty")
    return hashed_ngrams(text, n, buckets)


@dataclass(frozen=True)
class Condition:
    c_model: np.ndarray
    c_text: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConditionError(f"unknown provenance {self.provenance!r}")

    @property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.c_model, self.c_text])

    @property
    def dim(self) -> int:
        return self.c_model.size + self.c_text.size


def make_condition(c_model, c_text, model_dim: int | None = None, text_dim: int | None = None) -> Condition:
    c_model = np.asarray(c_model, dtype=np.float32).ravel()
    c_text = np.asarray(c_text, dtype=np.float32).ravel()
    if model_dim is not None and c_model.size != model_dim:
        raise ConditionError(f"c_model has dim {c_model.size}, expected {model_dim}")
    if text_dim is not None and c_text.size != text_dim:
        raise ConditionError(f"c_text has dim {c_text.size}, expected {text_dim}")
    return Condition(c_model, c_text)


def randomize_condition(cond: Condition, mode: str, seed: int, norm: float | None = None) -> Condition:
    """Replace one half with Gaussian noise scaled to ``norm``.

    ``norm`` should be the mean norm of real embeddings for that half; by
    default the norm of the half being replaced is used.
    """
    rng = nx.rng_stream(seed, "random-condition", mode)
    if mode == "random_model":
        target = norm if norm is not None else float(np.linalg.norm(cond.c_model))
        z = rng.standard_normal(cond.c_model.size)
        return Condition((z * target / np.linalg.norm(z)).astype(np.float32), cond.c_text, "random_model")
    if mode == "random_text":
        target = norm if norm is not None else float(np.linalg.norm(cond.c_text))
        z = rng.standard_normal(cond.c_text.size)
        return Condition(cond.c_model, (z * target / np.linalg.norm(z)).astype(np.float32), "random_text")
    raise ConditionError(f"unknown randomization mode {mode!r}")


class ConditionEncoder:
    """Trainable projections from featurized inputs to c_model and c_text."""

    def __init__(self, model_dim: int = 64, text_dim: int = 64, buckets: int = 2048, ngram: int = 3, seed: int = 0, n_stats: int = 9):
        rng = nx.rng_stream(seed, "condition-encoder")
        self.buckets, self.ngram = buckets, ngram
        self.model_dim, self.text_dim = model_dim, text_dim
        # unit-norm features: std-1 weights give O(1) output coordinates
        self.w_model = nx.parameter(rng.standard_normal((buckets + n_stats, model_dim)) * 1.0, "cond.w_model")
        self.w_text = nx.parameter(rng.standard_normal((buckets, text_dim)) * 1.0, "cond.w_text")

    def parameters(self) -> list[nx.Tensor]:
        return [self.w_model, self.w_text]

    def model_features(self, base: BaseModel) -> np.ndarray:
        return base_model_features(base, self.ngram, self.buckets)

    def text_features(self, spec: TaskSpec | str) -> np.ndarray:
        return task_text_features(spec, self.ngram, self.buckets)

    def project(self, model_feats: np.ndarray, text_feats: np.ndarray) -> nx.Tensor:
        """Differentiable combined condition for a batch of feature rows."""
        cm = nx.Tensor(np.atleast_2d(model_feats)) @ self.w_model
        ct = nx.Tensor(np.atleast_2d(text_feats)) @ self.w_text
        return nx.concat([cm, ct], axis=-1)

    def encode_base_model(self, base: BaseModel) -> np.ndarray:
        return (self.model_features(base) @ self.w_model.data).astype(np.float32)

    def encode_task_text(self, spec: TaskSpec | str) -> np.ndarray:
        return (self.text_features(spec) @ self.w_text.data).astype(np.float32)

    def condition(self, base: BaseModel, spec: TaskSpec | str) -> Condition:
        return make_condition(self.encode_base_model(base), self.encode_task_text(spec), self.model_dim, self.text_dim)
