"""End-to-end orchestration: diffusion training over a corpus, generation,
evaluation against trained and zero-shot baselines, condition ablations and
the rank sweep.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import container
from . import numerics as nx
from .basemodel import BaseModel
from .conditioning import Condition, randomize_condition
from .config import ExperimentConfig
from .corpus import CorpusEntry, TrainingError, _finetune_job, align_to_task_references
from .diffusion import DiffusionModel, diffusion_loss, make_schedule, sample_sequences
from .lora import LoraAdapter, merge_adapter
from .tasks import TaskSpec
from .tokenizer import TokenLayout, TokenSequence, detokenize, layout_template, tokenize
from .workers import pmap

log = logging.getLogger(__name__)

POOLED = "*"
MODES = ("real", "random_model", "random_text")


def finetune_cells(cfg: ExperimentConfig, bases: dict[str, BaseModel], tasks: Sequence[TaskSpec], versions: Sequence[str],
                   r: int, seeds: int) -> list[CorpusEntry]:
    jobs = [(cfg, bases[v], t, r, s) for v in versions for t in tasks for s in range(seeds)]
    return align_to_task_references(cfg, bases, list(tasks), pmap(_finetune_job, jobs))


def build_model(cfg: ExperimentConfig) -> DiffusionModel:
    m, d = cfg.model, cfg.diffusion
    schedule = make_schedule(d.steps, d.schedule, d.beta_start, d.beta_end)
    return DiffusionModel(
        cfg.tokenizer.k, cfg.tokenizer.pos_dim, schedule,
        cond_model_dim=m.cond_model_dim, cond_text_dim=m.cond_text_dim, buckets=m.buckets, ngram=m.ngram,
        ssm_hidden=m.ssm_hidden, proto_channels=m.proto_channels, cond_channels=m.cond_channels, channels=m.channels,
        blocks=m.blocks, kernel=m.kernel, time_dim=m.time_dim, embed_dim=m.embed_dim, seed=cfg.seed,
    )


@dataclass
class Generator:
    """A trained diffusion model plus what is needed to turn samples into adapters."""

    cfg: ExperimentConfig
    model: DiffusionModel
    templates: dict[str, TokenLayout]
    cond_norms: dict[str, float]
    loss_curve: list[tuple[int, float]] = field(default_factory=list)

    def template(self, task_id: str) -> TokenLayout:
        return self.templates.get(task_id, self.templates[POOLED])

    def condition(self, base: BaseModel, task: TaskSpec) -> Condition:
        return self.model.encoder.condition(base, task)


def _lr_at(it: int, iters: int, lr: float) -> float:
    warm = max(1, min(200, iters // 10))
    return lr * min(1.0, (it + 1) / warm) * (0.1 + 0.45 * (1.0 + math.cos(math.pi * it / iters)))


def _templates(seqs: list[TokenSequence], entries: list[CorpusEntry]) -> dict[str, TokenLayout]:
    out = {POOLED: layout_template([s.layout for s in seqs])}
    for tid in sorted({e.task_id for e in entries}):
        out[tid] = layout_template([s.layout for s, e in zip(seqs, entries) if e.task_id == tid])
    return out


def train_generator(cfg: ExperimentConfig, bases: dict[str, BaseModel], tasks: Sequence[TaskSpec], entries: list[CorpusEntry],
                    iterations: int | None = None, progress: Callable[[int, float], None] | None = None) -> Generator:
    """Fit the condition projections, the recurrence and the denoiser jointly on ``entries``."""
    if not entries:
        raise ValueError("cannot train on an empty corpus")
    tc = cfg.train
    iters = tc.iterations if iterations is None else iterations
    model = build_model(cfg)
    taskmap = {t.task_id: t for t in tasks}
    seqs = [tokenize(e.adapter, cfg.tokenizer.k, cfg.tokenizer.pos_dim) for e in entries]
    enc = model.encoder
    mfeat = {v: enc.model_features(bases[v]) for v in sorted({e.base_version for e in entries})}
    tfeat = {t: enc.text_features(taskmap[t]) for t in sorted({e.task_id for e in entries})}
    mf = np.stack([mfeat[e.base_version] for e in entries])
    tf = np.stack([tfeat[e.task_id] for e in entries])
    params = model.parameters()
    opt = nx.Adam(params, lr=tc.lr, clip=tc.clip)
    rng = nx.rng_stream(cfg.seed, "diffusion-train")
    curve, window = [], []
    for it in range(iters):
        idx = rng.integers(0, len(entries), tc.batch_sequences)
        cond = enc.project(mf[idx], tf[idx])
        loss = diffusion_loss(model, [seqs[i] for i in idx], cond, rng, rows=tc.token_rows)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"diffusion training diverged at iteration {it} (loss={value})")
        opt.step(nx.backward(loss, params), lr=_lr_at(it, iters, tc.lr))
        window.append(value)
        if (it + 1) % tc.log_every == 0 or it + 1 == iters:
            curve.append((it + 1, float(np.mean(window))))
            window = []
            if progress:
                progress(*curve[-1])
            log.info("train iteration %d loss %.5f", *curve[-1])
    c_model = mf @ enc.w_model.data
    c_text = tf @ enc.w_text.data
    norms = {"model": float(np.linalg.norm(c_model, axis=1).mean()), "text": float(np.linalg.norm(c_text, axis=1).mean())}
    return Generator(cfg, model, _templates(seqs, entries), norms, curve)


def save_generator(path, gen: Generator) -> str:
    arrays = {f"param/{k}": v for k, v in gen.model.save_arrays().items()}
    arrays["schedule/betas"] = gen.model.schedule.betas
    meta = {
        "kind": "generator",
        "config": gen.cfg.to_dict(),
        "templates": {k: v.to_dict() for k, v in sorted(gen.templates.items())},
        "cond_norms": gen.cond_norms,
        "loss_curve": [list(p) for p in gen.loss_curve],
    }
    return container.save(path, arrays, meta)


def load_generator(path, expected_sha256: str | None = None) -> Generator:
    arrays, meta = container.load(path, expected_sha256)
    if meta.get("kind") != "generator":
        raise container.ArtifactError(f"{path}: not a generator checkpoint")
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg)
    betas = arrays.get("schedule/betas")
    if betas is None or betas.shape != model.schedule.betas.shape or not np.allclose(betas, model.schedule.betas, rtol=1e-6):
        raise container.ArtifactError(f"{path}: stored noise schedule does not match its config")
    try:
        model.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    except (KeyError, ValueError) as e:
        raise container.ArtifactError(f"{path}: {e}") from None
    templates = {k: TokenLayout.from_dict(v) for k, v in meta["templates"].items()}
    return Generator(cfg, model, templates, meta["cond_norms"], [tuple(p) for p in meta["loss_curve"]])


def sample_seed(root: int, *names) -> int:
    key = "/".join(str(n) for n in (root, *names))
    return zlib.crc32(key.encode("utf-8"))


def conditions_for(gen: Generator, cells: Sequence[tuple[BaseModel, TaskSpec, int]], mode: str = "real") -> np.ndarray:
    """Combined condition rows for (base, task, sample index) cells, optionally randomized."""
    if mode not in MODES:
        raise ValueError(f"unknown conditioning mode {mode!r}; expected one of {MODES}")
    cache: dict[tuple[str, str], Condition] = {}
    rows = []
    for base, task, i in cells:
        key = (base.version_id, task.task_id)
        if key not in cache:
            cache[key] = gen.condition(base, task)
        cond = cache[key]
        if mode != "real":
            norm = gen.cond_norms["model" if mode == "random_model" else "text"]
            cond = randomize_condition(cond, mode, sample_seed(gen.cfg.eval.sample_seed, mode, *key, i), norm)
        rows.append(cond.combined)
    return np.stack(rows)


def generate_adapters(gen: Generator, cells: Sequence[tuple[BaseModel, TaskSpec, int]], mode: str = "real") -> list[LoraAdapter]:
    """One adapter per (base, task, sample index); all cells share one batched sampling run."""
    if not cells:
        return []
    conds = conditions_for(gen, cells, mode)
    seeds = [sample_seed(gen.cfg.eval.sample_seed, b.version_id, t.task_id, i) for b, t, i in cells]
    pooled = gen.templates[POOLED]
    seqs = sample_sequences(gen.model, conds, pooled, seeds)
    out = []
    for seq, (_, task, _) in zip(seqs, cells):
        layout = gen.template(task.task_id)
        out.append(detokenize(TokenSequence(seq.tokens, seq.positions, seq.pad_mask, layout), provenance="generated"))
    return out


def evaluate(gen: Generator, bases: dict[str, BaseModel], tasks: Sequence[TaskSpec], entries: Sequence[CorpusEntry],
             versions: Sequence[str], n_seeds: int | None = None, mode: str = "real", splits: dict[str, str] | None = None) -> list[dict]:
    """Per (version, task): zero-shot, mean trained-LoRA and generated (mean/min/max over seeds) accuracy."""
    n_seeds = gen.cfg.eval.n_seeds if n_seeds is None else n_seeds
    cells = [(bases[v], t, i) for v in versions for t in tasks for i in range(n_seeds)]
    # a poorly trained sampler can emit huge weights; they just score at chance
    with np.errstate(over="ignore", invalid="ignore"):
        adapters = generate_adapters(gen, cells, mode)
        data = {t.task_id: t.dataset("test", gen.cfg.corpus.n_test) for t in tasks}
        gen_acc: dict[tuple[str, str], list[float]] = {}
        for (base, task, _), ad in zip(cells, adapters):
            x, y = data[task.task_id]
            gen_acc.setdefault((base.version_id, task.task_id), []).append(merge_adapter(base, ad).accuracy(x, y))
    rows = []
    for v in versions:
        for t in tasks:
            x, y = data[t.task_id]
            trained = [e.eval_accuracy for e in entries if e.base_version == v and e.task_id == t.task_id]
            g = gen_acc[(v, t.task_id)]
            rows.append({
                "base_version": v,
                "split": (splits or {}).get(v, ""),
                "task_id": t.task_id,
                "mode": mode,
                "zero_shot": bases[v].accuracy(x, y),
                "trained": float(np.mean(trained)) if trained else float("nan"),
                "generated_mean": float(np.mean(g)),
                "generated_min": float(np.min(g)),
                "generated_max": float(np.max(g)),
                "n_seeds": len(g),
            })
    return rows


def ablate(gen: Generator, bases: dict[str, BaseModel], tasks: Sequence[TaskSpec], entries: Sequence[CorpusEntry],
           versions: Sequence[str], modes: Sequence[str] = MODES) -> dict[str, list[dict]]:
    return {m: evaluate(gen, bases, tasks, entries, versions, mode=m) for m in modes}


def sweep_budget(cfg: ExperimentConfig, n_tokens: int) -> dict:
    """Training overrides for a rank whose adapters have ``n_tokens`` tokens.

    Every step sees ``token_rows`` rows: short sequences get a larger sequence
    batch, long ones more iterations, so each token is visited about as often
    as at a rank whose batch exactly fills ``token_rows``.
    """
    tc, rs = cfg.train, cfg.ranksweep
    cover = tc.batch_sequences * n_tokens / tc.token_rows
    return {
        "iterations": math.ceil(rs.iterations * max(1.0, cover)),
        "batch_sequences": max(tc.batch_sequences, math.ceil(tc.token_rows / n_tokens)),
    }


def rank_sweep(cfg: ExperimentConfig, bases: dict[str, BaseModel], tasks: Sequence[TaskSpec],
               progress: Callable[[str], None] | None = None) -> list[dict]:
    """Per rank: fine-tune the sweep tasks, train a generator on them and evaluate on the training versions."""
    rs = cfg.ranksweep
    sweep_tasks = [t for t in tasks if t.task_id in rs.tasks]
    versions = cfg.corpus.train_versions
    rows = []
    for r in rs.ranks:
        entries = finetune_cells(cfg.replace(corpus={"rank": r}), bases, sweep_tasks, versions, r, cfg.corpus.seeds_per_cell)
        sub = cfg.replace(corpus={"rank": r}, train=sweep_budget(cfg, len(tokenize(entries[0].adapter, cfg.tokenizer.k))))
        gen = train_generator(sub, bases, sweep_tasks, entries)
        for row in evaluate(gen, bases, sweep_tasks, entries, versions):
            rows.append({"rank": r, **row})
        if progress:
            progress(f"rank {r} done")
    return rows


def summarize_by_task(rows: Sequence[dict]) -> dict[str, dict[str, float]]:
    """Mean over versions of zero-shot, trained and generated accuracy for each task."""
    out: dict[str, dict[str, float]] = {}
    for tid in dict.fromkeys(r["task_id"] for r in rows):
        sel = [r for r in rows if r["task_id"] == tid]
        out[tid] = {k: float(np.mean([r[k] for r in sel])) for k in ("zero_shot", "trained", "generated_mean")}
    return out

