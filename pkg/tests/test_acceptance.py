"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 4-7 share one end-to-end pipeline run through the CLI (corpus,
train, eval, ablate, ranksweep) with the configuration in PIPELINE below.
Run just this file with::

    pytest -v tests/test_acceptance.py
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from forge import numerics as nx
from forge import pipeline as pl
from forge.config import ExperimentConfig
from forge.corpus import build_bases, finetune_lora
from forge.diffusion import DiffusionModel, diffusion_loss, forward_diffuse, make_schedule, sample_sequences
from forge.lora import LoraAdapter, LoraFactor
from forge.recurrent import SsmBlock, ssm_scan
from forge.report import read_csv
from forge.tasks import make_task_suite
from forge.tokenizer import TokenSequence, detokenize, tokenize
from gradcheck import numeric_grad, rel_err

# Full desk pipeline used by criteria 4-7.
PIPELINE = {
    "seed": 0,
    "model": {"channels": 32, "blocks": 3},
    "train": {"iterations": 12000},
}

# Small pipeline for the reproducibility criterion.
SMALL = {
    "seed": 3,
    "base": {"pretrain_steps": 200, "evolve_steps": 50},
    "corpus": {"tasks": ["boolq", "mrpc"], "train_versions": ["t0", "t1"], "heldout_versions": ["t2"],
               "seeds_per_cell": 2, "n_train": 256, "n_test": 256, "lora_steps": 60},
    "model": {"ssm_hidden": 16, "channels": 8, "blocks": 1, "embed_dim": 32, "cond_model_dim": 8, "cond_text_dim": 8,
              "buckets": 64},
    "diffusion": {"steps": 20},
    "train": {"iterations": 30, "log_every": 10},
    "eval": {"n_seeds": 2},
    "ranksweep": {"ranks": [2, 4], "tasks": ["boolq"], "iterations": 20},
}

STAGES = ("corpus", "train", "eval", "ablate", "ranksweep")


def run_cli(command: str, config: Path, out: Path, threads: int = 1) -> None:
    env = {**os.environ, "FORGE_THREADS": str(threads)}
    proc = subprocess.run([sys.executable, "-m", "forge.cli", command, "--config", str(config), "--out", str(out)],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0, f"forge {command} exited {proc.returncode}:\n{proc.stderr[-2000:]}"


def run_pipeline(config: dict, out: Path, threads: int = 1) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "experiment.json"
    path.write_text(json.dumps(config, indent=2))
    for stage in STAGES:
        run_cli(stage, path, out, threads)
    return out


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    return run_pipeline(PIPELINE, tmp_path_factory.mktemp("desk"))


# ---------------------------------------------------------------- criterion 1


def _max_rel_err(fn, arrays, rng) -> float:
    """Worst relative error over all inputs of fn, for a random linear functional of its output."""
    leaves = [nx.parameter(a.copy()) for a in arrays]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    grads = nx.backward((out * nx.Tensor(proj)).sum(), leaves)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [nx.Tensor(x) if j == i else nx.Tensor(arrays[j]) for j in range(len(arrays))]
            return float((fn(*args).data * proj).sum())

        worst = max(worst, rel_err(grads[leaf], numeric_grad(f, arrays[i].copy())))
    return worst


def _matmul_case(rng):
    m, n, p = rng.integers(1, 7, 3)
    return _max_rel_err(nx.matmul, [rng.standard_normal((m, n)), rng.standard_normal((n, p))], rng)


def _conv_case(rng):
    cin, cout, length, batch = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 3)
    k = int(rng.choice([1, 3, 5]))
    last = bool(rng.integers(2))
    x = rng.standard_normal((batch, length, cin) if last else (batch, cin, length))
    return _max_rel_err(lambda a, w, b: nx.conv1d(a, w, b, channels_last=last),
                        [x, rng.standard_normal((cout, cin, k)), rng.standard_normal(cout)], rng)


def _layer_norm_case(rng):
    d = int(rng.integers(3, 9))
    return _max_rel_err(nx.layer_norm, [rng.standard_normal((int(rng.integers(1, 4)), d)), rng.standard_normal(d),
                                        rng.standard_normal(d)], rng)


def _ssm_case(rng):
    din, hidden, out = (int(v) for v in rng.integers(1, 6, 3))
    block = SsmBlock(din, hidden, out, seed=int(rng.integers(1 << 30)))
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 7)), din))

    def chain(xin):
        protos, _ = ssm_scan(block, xin)
        return nx.stack(protos, axis=1)

    xt = nx.parameter(x.copy())
    out_t = chain(xt)
    proj = rng.standard_normal(out_t.shape)
    params = block.parameters()
    grads = nx.backward((out_t * nx.Tensor(proj)).sum(), params + [xt])
    worst = rel_err(grads[xt], numeric_grad(lambda v: float((chain(nx.Tensor(v)).data * proj).sum()), x.copy()))
    for p in params:
        def f(v, p=p):
            old = p.data
            p.data = v
            val = float((chain(nx.Tensor(x)).data * proj).sum())
            p.data = old
            return val

        worst = max(worst, rel_err(grads[p], numeric_grad(f, p.data.copy())))
    return worst


TINY_MODEL = dict(cond_model_dim=3, cond_text_dim=3, buckets=8, ngram=3, ssm_hidden=5, proto_channels=2, cond_channels=1,
                  channels=4, blocks=1, time_dim=4, embed_dim=6)


def _ldiff_case(rng):
    """Full loss, condition featurization projections included, against one random parameter tensor."""
    k = int(rng.integers(2, 5))
    model = DiffusionModel(k, 4, make_schedule(int(rng.integers(5, 30))), seed=int(rng.integers(1 << 30)), **TINY_MODEL)
    for p in model.parameters():  # move off the zero-initialized head and the zero start token
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    d_out, d_in, r = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 1
    adapters = [LoraAdapter((LoraFactor("fc1", rng.standard_normal((d_out, r)), rng.standard_normal((r, d_in))),))
                for _ in range(2)]
    seqs = [tokenize(a, k, 4) for a in adapters]
    n = sum(len(s) for s in seqs)
    mf = rng.standard_normal((2, model.encoder.w_model.shape[0]))
    tf = rng.standard_normal((2, model.encoder.w_text.shape[0]))
    t, eps = rng.integers(1, model.schedule.T + 1, n), rng.standard_normal((n, k))
    params = model.parameters()
    target = params[int(rng.integers(len(params)))]

    def loss():
        return diffusion_loss(model, seqs, model.encoder.project(mf, tf), t=t, eps=eps)

    grad = nx.backward(loss(), [target])[target]
    flat = np.arange(target.data.size)
    idx = rng.choice(flat, min(12, flat.size), replace=False)
    base = target.data.copy()

    def f(v):
        full = base.copy().reshape(-1)
        full[idx] = v
        target.data = full.reshape(base.shape)
        out = loss().item()
        target.data = base
        return out

    return rel_err(grad.reshape(-1)[idx], numeric_grad(f, base.reshape(-1)[idx].copy()))


@pytest.mark.criterion(1)
def test_criterion_1_gradient_checks(verdict):
    rng = np.random.default_rng(2024)
    start = time.process_time()
    worst = {}
    with nx.precision(np.float64):
        for name, case in (("matmul", _matmul_case), ("conv1d", _conv_case), ("layer_norm", _layer_norm_case),
                           ("ssm_chain", _ssm_case), ("L_diff", _ldiff_case)):
            worst[name] = max(case(rng) for _ in range(100))
    elapsed = time.process_time() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    verdict(ok, "100 instances each; worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
            + f"; {elapsed:.0f}s CPU")
    assert ok


# ---------------------------------------------------------------- criterion 2


def _random_adapter(rng) -> LoraAdapter:
    r = int(rng.integers(1, 9))
    factors = []
    for i in range(int(rng.integers(1, 5))):
        d_out, d_in = int(rng.integers(r, 40)), int(rng.integers(r, 40))
        scale = 10.0 ** rng.uniform(-3, 1)
        factors.append(LoraFactor(f"layer{i}", (rng.standard_normal((d_out, r)) * scale).astype(np.float32),
                                  (rng.standard_normal((r, d_in)) * scale + rng.normal()).astype(np.float32)))
    return LoraAdapter(tuple(factors))


@pytest.mark.criterion(2)
def test_criterion_2_tokenizer_round_trip(verdict):
    rng = np.random.default_rng(7)
    worst, count_ok, cases = 0.0, True, 0
    for _ in range(50):
        adapter = _random_adapter(rng)
        for k in (3, 8, 64):
            seq = tokenize(adapter, k)
            expected = sum(math.ceil((f.B.size + f.A.size) / k) for f in adapter.factors)
            count_ok &= len(seq) == expected
            back = detokenize(seq)
            for f, g in zip(adapter.factors, back.factors):
                for a, b in ((f.B, g.B), (f.A, g.A)):
                    a64, b64 = a.astype(np.float64), b.astype(np.float64)
                    worst = max(worst, float(np.max(np.abs(b64 - a64) / np.maximum(np.abs(a64), np.finfo(np.float32).tiny))))
            cases += 1
    ok = count_ok and worst <= 1e-6
    verdict(ok, f"{cases} round trips; worst per-element rel err {worst:.1e}; token count exact: {count_ok}")
    assert ok


# ---------------------------------------------------------------- criterion 3


def _overfit_mae() -> float:
    """Train on one fine-tuned checkpoint only, sample it back, MAE per element in token space."""
    cfg = ExperimentConfig().replace(
        model={"channels": 32, "blocks": 3},
        train={"iterations": 2000},
    )
    tasks = make_task_suite(cfg.seed, cfg.base.d_in, ["boolq"])
    bases = build_bases(cfg.replace(corpus={"train_versions": ["t0"], "heldout_versions": []}), tasks)
    entry = finetune_lora(cfg, bases["t0"], tasks[0], cfg.corpus.rank, 0)
    gen = pl.train_generator(cfg, bases, tasks, [entry])
    target = tokenize(entry.adapter, cfg.tokenizer.k, cfg.tokenizer.pos_dim)
    cond = pl.conditions_for(gen, [(bases["t0"], tasks[0], 0)])
    sample = sample_sequences(gen.model, cond, target.layout, [11])[0]
    keep = ~target.pad_mask
    return float(np.abs(sample.tokens - target.tokens)[keep].mean())


@pytest.mark.criterion(3)
def test_criterion_3_diffusion_correctness(verdict):
    details, ok = [], True

    worst = 0.0
    for T in (10, 200, 1000):
        s = make_schedule(T)
        t = np.arange(T + 1)
        worst = max(worst, float(np.max(np.abs(s.signal(t) ** 2 + s.noise(t) ** 2 - 1.0))))
    ok &= worst <= 1e-6
    details.append(f"schedule {worst:.1e}")

    # forward marginal q(u_t | u_0) = N(sqrt(ab_t) u_0, (1 - ab_t) I) by Monte Carlo
    s = make_schedule(200)
    rng = np.random.default_rng(0)
    n = 100_000
    u0 = rng.standard_normal(8)
    mean_ok, var_dev = True, 0.0
    for t in (1, 50, 200):
        draws = forward_diffuse(np.broadcast_to(u0, (n, 8)), np.full(n, t), rng.standard_normal((n, 8)), s)
        sd = math.sqrt(1.0 - s.alphabars[t])
        mean_ok &= bool(np.all(np.abs(draws.mean(0) - math.sqrt(s.alphabars[t]) * u0) <= 3 * sd / math.sqrt(n)))
        var_dev = max(var_dev, float(np.max(np.abs(draws.var(0) / sd**2 - 1.0))))
    ok &= mean_ok and var_dev <= 0.02
    details.append(f"MC mean in 3-sigma band: {mean_ok}, var dev {100 * var_dev:.2f}%")

    model = DiffusionModel(8, 16, s, seed=1, **{**TINY_MODEL, "buckets": 2048})
    for p in model.parameters():
        p.data = p.data + 0.2 * np.random.default_rng(2).standard_normal(p.shape)
    ad = LoraAdapter((LoraFactor("fc1", np.ones((5, 2), np.float32), np.ones((2, 6), np.float32)),))
    seq = tokenize(ad, 8, 16)  # 22 elements -> 2 padded slots
    dirty = seq.tokens.copy()
    dirty[seq.pad_mask] = np.random.default_rng(3).standard_normal(int(seq.pad_mask.sum())) * 1e3
    cond = np.random.default_rng(4).standard_normal((1, model.cond_dim))
    a = diffusion_loss(model, [seq], cond, np.random.default_rng(5))
    b = diffusion_loss(model, [TokenSequence(dirty, seq.positions, seq.pad_mask, seq.layout)], cond, np.random.default_rng(5))
    bitwise = a.data.tobytes() == b.data.tobytes()
    padded = int(seq.pad_mask.sum())
    ok &= bitwise and padded > 0
    details.append(f"pad masking bitwise over {padded} padded slots: {bitwise}")

    mae = _overfit_mae()
    ok &= mae < 0.1
    details.append(f"overfit-one MAE {mae:.3f}")
    verdict(ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------- criteria 4-7


def _task_means(rows, key_fields=("task_id",)):
    out = {}
    for r in rows:
        key = tuple(r[f] for f in key_fields)
        out.setdefault(key, []).append(r)
    return {k: {m: float(np.mean([float(r[m]) for r in v])) for m in ("zero_shot", "trained", "generated_mean")}
            for k, v in out.items()}


@pytest.mark.criterion(4)
def test_criterion_4_generated_matches_trained(desk_run, verdict):
    rows = [r for r in read_csv(desk_run / "reports" / "eval" / "eval.csv") if r["split"] == "train"]
    means = _task_means(rows)
    close = {k[0]: abs(m["generated_mean"] - m["trained"]) <= 0.03 for k, m in means.items()}
    beats = {k[0]: m["generated_mean"] > m["zero_shot"] for k, m in means.items()}
    ok = len(means) == 6 and sum(close.values()) >= 5 and all(beats.values())
    cells = ", ".join(f"{k[0]} {100 * m['generated_mean']:.1f}/{100 * m['trained']:.1f}/{100 * m['zero_shot']:.1f}"
                      for k, m in means.items())
    verdict(ok, f"within 3 pts on {sum(close.values())}/6, beats zero-shot on {sum(beats.values())}/6 "
                f"(gen/trained/zero-shot: {cells})")
    assert ok


@pytest.mark.criterion(5)
def test_criterion_5_heldout_versions(desk_run, verdict):
    rows = [r for r in read_csv(desk_run / "reports" / "eval" / "eval.csv") if r["split"] == "heldout"]
    wins = [(r["base_version"], r["task_id"], float(r["generated_mean"]) > float(r["zero_shot"])) for r in rows]
    ok = len(rows) == 12 and all(w for *_, w in wins)
    losers = [f"{v}/{t}" for v, t, w in wins if not w]
    verdict(ok, f"generated beats zero-shot in {sum(w for *_, w in wins)}/{len(rows)} held-out cells"
                + (f"; misses {losers}" if losers else ""))
    assert ok


@pytest.mark.criterion(6)
def test_criterion_6_condition_ablation(desk_run, verdict):
    rows = read_csv(desk_run / "reports" / "ablate" / "ablate.csv")
    mean = {m: float(np.mean([float(r["generated_mean"]) for r in rows if r["mode"] == m])) for m in pl.MODES}
    ok = mean["random_text"] < mean["random_model"] < mean["real"]
    verdict(ok, "mean accuracy " + ", ".join(f"{m}={100 * v:.2f}" for m, v in mean.items()))
    assert ok


@pytest.mark.criterion(7)
def test_criterion_7_rank_sweep(desk_run, verdict):
    rows = read_csv(desk_run / "reports" / "ranksweep" / "ranksweep.csv")
    means = _task_means(rows, ("rank", "task_id"))
    gaps = {k: m["generated_mean"] - m["trained"] for k, m in means.items()}
    expected = {(str(r), t) for r in (2, 4, 8, 16, 32) for t in ("boolq", "mrpc")}
    ok = set(gaps) == expected and all(abs(g) <= 0.03 for g in gaps.values())
    verdict(ok, "gap (pts) " + ", ".join(f"r{r}/{t} {100 * g:+.1f}" for (r, t), g in sorted(gaps.items(), key=lambda x: (int(x[0][0]), x[0][1]))))
    assert ok


# ---------------------------------------------------------------- criterion 8


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(8)
def test_criterion_8_reproducible_reports(tmp_path, verdict):
    a = _tree_bytes(run_pipeline(SMALL, tmp_path / "a", threads=1))
    b = _tree_bytes(run_pipeline(SMALL, tmp_path / "b", threads=2))
    reports = [k for k in a if k.startswith("reports/")]
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = bool(reports) and not differing
    verdict(ok, f"{len(a)} files compared ({len(reports)} report files), FORGE_THREADS 1 vs 2"
                + (f"; differing: {differing[:5]}" if differing else "; all bytes identical"))
    assert ok
