"""Training population: base models, simulated evolution, LoRA fine-tuning.

Corpus layout on disk::

    corpus/manifest.json
    corpus/bases/<version>.ckpt
    corpus/<version>/<task_id>/<seed>.ckpt
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from . import numerics as nx
from .basemodel import ArchMeta, BaseModel, init_mlp
from .config import ExperimentConfig
from .lora import LoraAdapter, LoraFactor, align_adapter, canonical_factors, merge_adapter
from .tasks import TaskSpec, make_task_suite
from .workers import pmap

log = logging.getLogger(__name__)

DRIFT_DEG_PER_VERSION = 6.0
DRIFT_SHIFT_NORM = 0.25
GENERIC_PER_TASK = 2048


class TrainingError(RuntimeError):
    """Loss diverged during training."""


@dataclass(frozen=True)
class CorpusEntry:
    adapter: LoraAdapter
    base_version: str
    task_id: str
    seed: int
    eval_accuracy: float
    zero_shot: float = float("nan")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.base_version, self.task_id, self.seed)


def version_index(version_id: str) -> int:
    if not version_id.startswith("t") or not version_id[1:].isdigit():
        raise ValueError(f"version ids look like t0, t1, ...; got {version_id!r}")
    return int(version_id[1:])


def _drift_vector(seed: int, d_in: int) -> np.ndarray:
    v = nx.rng_stream(seed, "evolution-drift").standard_normal(d_in)
    return v * (DRIFT_SHIFT_NORM / np.linalg.norm(v))


def pretraining_stream(tasks: list[TaskSpec], stream: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Mixture of every task with generic labels; later streams drift."""
    shift = stream * _drift_vector(seed, tasks[0].d_in)
    xs, ys = [], []
    for t in tasks:
        x, y = t.generic_dataset(GENERIC_PER_TASK, stream, seed, drift=stream * DRIFT_DEG_PER_VERSION, shift=shift)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def _fit(model: BaseModel, x, y, steps, lr, batch, rng) -> tuple[BaseModel, float]:
    params = {k: nx.parameter(v.copy(), k) for k, v in model.layers.items()}
    opt = nx.Adam(list(params.values()), lr=lr)
    loss_val = float("nan")
    for step in range(steps):
        idx = rng.integers(0, len(x), batch)
        logits = _forward_params(model, params, x[idx])
        loss = nx.softmax_cross_entropy(logits, y[idx])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingError(f"loss diverged at step {step} while training {model.version_id}")
        opt.step(nx.backward(loss, opt.params))
    layers = {k: p.data.astype(np.float32) for k, p in params.items()}
    return model.replace(layers=layers), loss_val


def _forward_params(model: BaseModel, params: dict, x) -> nx.Tensor:
    h = nx.Tensor(x)
    names = model.linear_layers()
    act = {"silu": nx.silu, "tanh": nx.tanh, "relu": nx.relu}[model.arch.activation]
    for i, name in enumerate(names):
        h = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
        if i < len(names) - 1:
            h = act(h)
    return h


def pretrain_base(cfg: ExperimentConfig, tasks: list[TaskSpec], seed: int | None = None, steps: int | None = None) -> tuple[BaseModel, float]:
    seed = cfg.seed if seed is None else seed
    b = cfg.base
    dims = (b.d_in, b.hidden, b.hidden, b.n_classes)
    model = init_mlp(dims, seed, b.activation, "t0")
    steps = b.pretrain_steps if steps is None else steps
    if steps == 0:
        return model, float("nan")
    x, y = pretraining_stream(tasks, 0, seed)
    return _fit(model, x, y, steps, b.pretrain_lr, b.batch, nx.rng_stream(seed, "pretrain-batches"))


def evolve_base(cfg: ExperimentConfig, base: BaseModel, tasks: list[TaskSpec], new_version: str, seed: int | None = None, steps: int | None = None) -> tuple[BaseModel, float]:
    """Continual training of ``base`` on the next drifted pretraining stream."""
    seed = cfg.seed if seed is None else seed
    steps = cfg.base.evolve_steps if steps is None else steps
    if new_version == base.version_id:
        raise ValueError(f"evolved version must differ from {base.version_id}")
    if steps < 1:
        raise ValueError("evolution needs at least one training step")
    k = version_index(new_version)
    if k != version_index(base.version_id) + 1:
        raise ValueError(f"lineage gap: {base.version_id} -> {new_version}")
    x, y = pretraining_stream(tasks, k, seed)
    model, loss = _fit(base, x, y, steps, cfg.base.evolve_lr, cfg.base.batch, nx.rng_stream(seed, "evolve-batches", k))
    arch = ArchMeta(base.arch.dims, base.arch.activation, base.arch.lineage + (new_version,))
    return model.replace(version_id=new_version, arch=arch), loss


def build_bases(cfg: ExperimentConfig, tasks: list[TaskSpec]) -> dict[str, BaseModel]:
    versions = cfg.corpus.train_versions + cfg.corpus.heldout_versions
    last = max(version_index(v) for v in versions)
    model, _ = pretrain_base(cfg, tasks)
    chain = {"t0": model}
    for k in range(1, last + 1):
        model, _ = evolve_base(cfg, model, tasks, f"t{k}")
        chain[f"t{k}"] = model
    return {v: chain[v] for v in versions}


def finetune_lora(cfg: ExperimentConfig, base: BaseModel, task: TaskSpec, r: int, seed: int, steps: int | None = None) -> CorpusEntry:
    """Train rank-r factors on every target layer with the base frozen."""
    if r < 1:
        raise ValueError("LoRA rank must be >= 1")
    c = cfg.corpus
    steps = c.lora_steps if steps is None else steps
    x, y = task.dataset("train", c.n_train)
    xt, yt = task.dataset("test", c.n_test)
    # init depends on the seed only, so a seed's adapters share a starting point across cells
    init = nx.rng_stream(seed, "lora-init", r)
    factors = {}
    for name in base.lora_targets():
        d_out, d_in = base.weight(name).shape
        A = nx.parameter((init.standard_normal((r, d_in)) * 0.02).astype(np.float32), f"{name}.A")
        B = nx.parameter(np.zeros((d_out, r), np.float32), f"{name}.B")
        factors[name] = (B, A)
    params = [p for pair in factors.values() for p in pair]
    opt = nx.Adam(params, lr=c.lora_lr)
    rng = nx.rng_stream(seed, "lora-batches", base.version_id, task.task_id, r)
    for step in range(steps):
        idx = rng.integers(0, len(x), c.lora_batch)
        loss = nx.softmax_cross_entropy(base.forward(x[idx], factors), y[idx])
        if not np.isfinite(loss.item()):
            raise TrainingError(
                f"LoRA training diverged at step {step} (base={base.version_id}, task={task.task_id}, r={r}, seed={seed})"
            )
        opt.step(nx.backward(loss, params))
    adapter = LoraAdapter(
        tuple(LoraFactor(n, *canonical_factors(B.data.astype(np.float32), A.data.astype(np.float32)))
              for n, (B, A) in factors.items()),
        (base.version_id, task.task_id, seed),
    )
    acc = merge_adapter(base, adapter).accuracy(xt, yt)
    return CorpusEntry(adapter, base.version_id, task.task_id, seed, acc, base.accuracy(xt, yt))


# persistence


def save_base(path, base: BaseModel) -> str:
    meta = {
        "version_id": base.version_id,
        "dims": list(base.arch.dims),
        "activation": base.arch.activation,
        "lineage": list(base.arch.lineage),
    }
    return container.save(path, base.layers, {"kind": "base", **meta})


def load_base(path, expected_sha256: str | None = None) -> BaseModel:
    arrays, meta = container.load(path, expected_sha256)
    if meta.get("kind") != "base":
        raise container.ArtifactError(f"{path}: not a base-model checkpoint")
    arch = ArchMeta(tuple(meta["dims"]), meta["activation"], tuple(meta["lineage"]))
    return BaseModel(meta["version_id"], arrays, arch)


def save_adapter(path, adapter: LoraAdapter, meta: dict | None = None) -> str:
    m = {"kind": "adapter", "layer_ids": adapter.layer_ids, "rank": adapter.rank, "provenance": _prov(adapter.provenance)}
    m.update(meta or {})
    return container.save(path, adapter.arrays(), m)


def load_adapter(path, expected_sha256: str | None = None) -> tuple[LoraAdapter, dict]:
    arrays, meta = container.load(path, expected_sha256)
    if meta.get("kind") != "adapter":
        raise container.ArtifactError(f"{path}: not an adapter checkpoint")
    prov = meta["provenance"]
    prov = tuple(prov) if isinstance(prov, list) else prov
    return LoraAdapter.from_arrays(arrays, meta["layer_ids"], prov), meta


def _prov(p):
    return list(p) if isinstance(p, tuple) else p


@dataclass
class Corpus:
    """A loaded corpus: bases, tasks and entries (train and held-out)."""

    root: Path
    manifest: dict
    bases: dict[str, BaseModel]
    tasks: list[TaskSpec]
    entries: list[CorpusEntry]

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def split(self, name: str) -> list[CorpusEntry]:
        versions = self.manifest["train_versions"] if name == "train" else self.manifest["heldout_versions"]
        return [e for e in self.entries if e.base_version in versions]


def manifest_hash(entries: list[dict]) -> str:
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e['path']}:{e['sha256']}\n".encode())
    return h.hexdigest()


def _finetune_job(job) -> CorpusEntry:
    cfg, base, task, r, seed = job
    return finetune_lora(cfg, base, task, r, seed)


def align_to_task_references(cfg: ExperimentConfig, bases: dict[str, BaseModel], tasks: list[TaskSpec],
                              entries: list[CorpusEntry]) -> list[CorpusEntry]:
    """Rotate every adapter into the factor gauge of its task's first entry, then re-measure accuracy.

    Seeds and base versions of one task then share a parameterization, so the
    generator sees one coherent target per task instead of gauge copies.
    """
    refs: dict[str, LoraAdapter] = {}
    for e in entries:
        refs.setdefault(e.task_id, e.adapter)
    data = {t.task_id: t.dataset("test", cfg.corpus.n_test) for t in tasks}
    out = []
    for e in entries:
        adapter = align_adapter(e.adapter, refs[e.task_id])
        x, y = data[e.task_id]
        acc = merge_adapter(bases[e.base_version], adapter).accuracy(x, y)
        out.append(CorpusEntry(adapter, e.base_version, e.task_id, e.seed, acc, e.zero_shot))
    return out


def build_corpus(cfg: ExperimentConfig, root, tasks: list[TaskSpec] | None = None, progress=None) -> dict:
    """Train every (version, task, seed) cell and write checkpoints plus manifest.json."""
    root = Path(root)
    c = cfg.corpus
    tasks = tasks or make_task_suite(cfg.seed, cfg.base.d_in, c.tasks)
    bases = build_bases(cfg, tasks)
    base_rows = []
    for v, b in bases.items():
        sha = save_base(root / "bases" / f"{v}.ckpt", b)
        base_rows.append({"version_id": v, "path": f"bases/{v}.ckpt", "sha256": sha, "lineage": list(b.arch.lineage)})
    cells = [(v, t, s) for v in c.train_versions + c.heldout_versions for t in tasks for s in range(c.seeds_per_cell)]
    keys = [(v, t.task_id, s) for v, t, s in cells]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate corpus cells")
    trained = pmap(_finetune_job, [(cfg, bases[v], t, c.rank, s) for v, t, s in cells])
    trained = align_to_task_references(cfg, bases, tasks, trained)
    rows = []
    for (v, t, s), entry in zip(cells, trained):
        rel = f"{v}/{t.task_id}/{s}.ckpt"
        sha = save_adapter(root / rel, entry.adapter, {"eval_accuracy": entry.eval_accuracy})
        rows.append(
            {
                "base_version": v,
                "task_id": t.task_id,
                "seed": s,
                "rank": c.rank,
                "split": "train" if v in c.train_versions else "heldout",
                "path": rel,
                "sha256": sha,
                "eval_accuracy": entry.eval_accuracy,
                "zero_shot": entry.zero_shot,
            }
        )
        if progress:
            progress(rows[-1])
        log.info("corpus %s/%s/%d acc=%.4f (zero-shot %.4f)", v, t.task_id, s, entry.eval_accuracy, entry.zero_shot)
    manifest = {
        "format": "forge-corpus/1",
        "config": cfg.to_dict(),
        "train_versions": list(c.train_versions),
        "heldout_versions": list(c.heldout_versions),
        "tasks": [t.task_id for t in tasks],
        "bases": base_rows,
        "entries": rows,
        "hash": manifest_hash(rows),
    }
    container.atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(root, verify: bool = True) -> Corpus:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise container.ArtifactError(f"missing corpus manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except ValueError as e:
        raise container.ArtifactError(f"{mpath}: corrupt manifest ({e})") from None
    if verify and manifest_hash(manifest["entries"]) != manifest["hash"]:
        raise container.ArtifactError(f"{mpath}: entry list does not match recorded hash {manifest['hash']}")
    cfg = ExperimentConfig.from_dict(manifest["config"])
    tasks = make_task_suite(cfg.seed, cfg.base.d_in, manifest["tasks"])
    bases = {b["version_id"]: load_base(root / b["path"], b["sha256"] if verify else None) for b in manifest["bases"]}
    entries = []
    for row in manifest["entries"]:
        adapter, _ = load_adapter(root / row["path"], row["sha256"] if verify else None)
        entries.append(CorpusEntry(adapter, row["base_version"], row["task_id"], row["seed"], row["eval_accuracy"], row["zero_shot"]))
    return Corpus(root, manifest, bases, tasks, entries)
