"""Synthetic downstream tasks over R^d.

Each task draws a low-dimensional core point z, labels it with a geometric
rule, and embeds it into the model input space through a fixed random
orthonormal map plus a task signature offset. The same rule evaluated on a
rotated/shifted copy of z gives the "generic" labels base models are
pretrained on, so a base model is correlated with, but not equal to, the
downstream labelling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import rng_stream

PROMPTS = {
    "boolq": "LoRA adapter for BoolQ-analogue task: two interleaved crescent moons; answer which moon a point belongs to.",
    "sst2": "LoRA adapter for SST-2-analogue task: four Gaussian blobs with alternating polarity; classify the sentiment of the blob.",
    "mrpc": "LoRA adapter for MRPC-analogue task: XOR of quadrants; decide whether the two coordinates agree in sign.",
    "rte": "LoRA adapter for RTE-analogue task: ring versus disk; decide if a point lies outside the inner radius.",
    "winogrande": "LoRA adapter for Winogrande-analogue task: parity of three thresholded coordinates.",
    "gsm8k": "LoRA adapter for GSM8K-analogue task: linear rule over three coordinates with distracting dimensions.",
}

FAMILIES = {
    "boolq": "two_moons",
    "sst2": "gaussian_blobs",
    "mrpc": "xor_quadrants",
    "rte": "ring_vs_disk",
    "winogrande": "parity_thresholds",
    "gsm8k": "linear_distractors",
}

CORE_DIMS = {"two_moons": 2, "gaussian_blobs": 2, "xor_quadrants": 2, "ring_vs_disk": 2, "parity_thresholds": 3, "linear_distractors": 6}

# rotation (degrees) and shift of the core plane used for generic labels
GENERIC = {
    "two_moons": (35.0, (0.25, -0.2)),
    "gaussian_blobs": (40.0, (0.3, 0.0)),
    "xor_quadrants": (25.0, (0.1, 0.1)),
    "ring_vs_disk": (0.0, (0.45, 0.2)),
    "parity_thresholds": (20.0, (0.2, -0.1)),
    "linear_distractors": (50.0, (0.0, 0.0)),
}

_BLOB_CENTERS = np.array([[-1.0, -0.4], [0.2, 1.0], [1.0, -0.6], [-0.6, 0.5]])
_BLOB_LABELS = np.array([0, 1, 0, 1])


def _rule(family: str, z: np.ndarray) -> np.ndarray:
    if family == "two_moons":
        # distance to the upper arc (centre 0,0) vs the lower arc (centre 1,0.5)
        d0 = _arc_distance(z, np.array([0.0, 0.0]), 0.0, np.pi)
        d1 = _arc_distance(z, np.array([1.0, 0.5]), np.pi, 2 * np.pi)
        return (d1 < d0).astype(np.int64)
    if family == "gaussian_blobs":
        d = ((z[:, None, :2] - _BLOB_CENTERS[None]) ** 2).sum(-1)
        return _BLOB_LABELS[d.argmin(1)]
    if family == "xor_quadrants":
        return ((z[:, 0] > 0) ^ (z[:, 1] > 0)).astype(np.int64)
    if family == "ring_vs_disk":
        return (np.hypot(z[:, 0], z[:, 1]) > 1.4 / np.sqrt(2)).astype(np.int64)
    if family == "parity_thresholds":
        return ((z > 0).sum(1) % 2).astype(np.int64)
    if family == "linear_distractors":
        return (z[:, 0] + 0.8 * z[:, 1] - 0.6 * z[:, 2] > 0).astype(np.int64)
    raise ValueError(f"unknown task family {family!r}")


def _arc_distance(z, centre, lo, hi):
    v = z[:, :2] - centre
    ang = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
    inside = (ang >= lo) & (ang <= hi)
    radial = np.abs(np.hypot(v[:, 0], v[:, 1]) - 1.0)
    ends = np.stack([centre + [np.cos(lo), np.sin(lo)], centre + [np.cos(hi), np.sin(hi)]])
    end_d = np.sqrt(((z[:, None, :2] - ends[None]) ** 2).sum(-1)).min(1)
    return np.where(inside, radial, end_d)


def _sample_core(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if family == "two_moons":
        t = rng.uniform(0, np.pi, n)
        upper = rng.random(n) < 0.5
        x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
        y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
        z = np.stack([x, y], 1) + rng.normal(0, 0.12, (n, 2))
        return z - [0.5, 0.25]
    if family == "gaussian_blobs":
        idx = rng.integers(0, len(_BLOB_CENTERS), n)
        return _BLOB_CENTERS[idx] + rng.normal(0, 0.35, (n, 2))
    if family == "xor_quadrants":
        return rng.uniform(-1, 1, (n, 2))
    if family == "ring_vs_disk":
        r = 1.4 * np.sqrt(rng.random(n))
        a = rng.uniform(0, 2 * np.pi, n)
        return np.stack([r * np.cos(a), r * np.sin(a)], 1)
    if family == "parity_thresholds":
        return rng.uniform(-1, 1, (n, 3))
    if family == "linear_distractors":
        return rng.normal(0, 1, (n, 6))
    raise ValueError(f"unknown task family {family!r}")


def _perturb(family: str, z: np.ndarray, extra_deg: float = 0.0) -> np.ndarray:
    deg, shift = GENERIC[family]
    th = np.deg2rad(deg + extra_deg)
    c, s = np.cos(th), np.sin(th)
    out = z.copy()
    out[:, 0] = c * z[:, 0] - s * z[:, 1] + shift[0]
    out[:, 1] = s * z[:, 0] + c * z[:, 1] + shift[1]
    return out


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str
    prompt_text: str
    embed: np.ndarray  # (d_in, core_dim), orthonormal columns
    signature: np.ndarray  # (d_in,)
    suite_seed: int
    input_noise: float = 0.05
    n_classes: int = 2
    metric: str = "accuracy"

    @property
    def d_in(self) -> int:
        return self.embed.shape[0]

    def _draw(self, n: int, rng: np.random.Generator, label_fn) -> tuple[np.ndarray, np.ndarray]:
        # exact class balance via rejection
        per = [n // 2, n - n // 2]
        zs, ys = [], []
        got = [0, 0]
        while got[0] < per[0] or got[1] < per[1]:
            z = _sample_core(self.family, max(2 * n, 64), rng)
            y = label_fn(z)
            for c in (0, 1):
                take = z[y == c][: per[c] - got[c]]
                zs.append(take)
                ys.append(np.full(len(take), c, np.int64))
                got[c] += len(take)
        z = np.concatenate(zs)
        y = np.concatenate(ys)
        order = rng.permutation(n)
        return z[order], y[order]

    def embed_core(self, z: np.ndarray, rng: np.random.Generator, shift: np.ndarray | None = None) -> np.ndarray:
        x = z @ self.embed.T + self.signature
        x = x + rng.normal(0, self.input_noise, x.shape)
        if shift is not None:
            x = x + shift
        return x.astype(np.float32)

    def dataset(self, split: str, n: int) -> tuple[np.ndarray, np.ndarray]:
        """True-label data for a split ("train" or "test"); deterministic."""
        rng = rng_stream(self.suite_seed, "task-data", self.task_id, split)
        z, y = self._draw(n, rng, lambda zz: _rule(self.family, zz))
        return self.embed_core(z, rng), y

    def generic_dataset(self, n: int, stream: int, seed: int, drift: float = 0.0, shift: np.ndarray | None = None):
        """Pretraining data: the same inputs labelled by the perturbed rule."""
        rng = rng_stream(seed, "generic-data", self.task_id, stream)
        z, y = self._draw(n, rng, lambda zz: _rule(self.family, _perturb(self.family, zz, drift)))
        return self.embed_core(z, rng, shift), y

    def fewshot(self, n: int = 4) -> list[tuple[list[float], int]]:
        rng = rng_stream(self.suite_seed, "fewshot", self.task_id)
        z, y = self._draw(n, rng, lambda zz: _rule(self.family, zz))
        return [([round(float(v), 2) for v in zi], int(yi)) for zi, yi in zip(z, y)]


def make_task_suite(seed: int = 0, d_in: int = 32, task_ids=None) -> list[TaskSpec]:
    task_ids = list(task_ids or PROMPTS)
    rng = rng_stream(seed, "task-suite")
    suite = []
    for tid in PROMPTS:
        family = FAMILIES[tid]
        m = CORE_DIMS[family]
        q, _ = np.linalg.qr(rng.standard_normal((d_in, m)))
        sig = rng.standard_normal(d_in)
        sig *= 1.5 / np.linalg.norm(sig)
        spec = TaskSpec(tid, family, "", q.astype(np.float64), sig, seed)
        shots = "; ".join(f"input={z} -> label {y}" for z, y in spec.fewshot())
        prompt = f"{PROMPTS[tid]} Examples: {shots}"
        suite.append(TaskSpec(tid, family, prompt, spec.embed, spec.signature, seed))
    return [t for t in suite if t.task_id in task_ids]
