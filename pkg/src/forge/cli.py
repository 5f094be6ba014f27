"""Command-line entry point.

    forge corpus|train|generate|eval|ablate|ranksweep --config PATH [--seed N] [--out DIR]

Every command works inside one run directory (``--out``)::

    corpus/                      manifest.json, bases/, <version>/<task>/<seed>.ckpt
    model/generator.ckpt         trained diffusion pipeline
    generated/<version>/<task>/  sampled adapters
    reports/<command>/           CSV, summary.txt and SVG charts

Exit codes: 0 ok, 2 config error, 3 artifact error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import container, report
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig
from .corpus import Corpus, TrainingError, build_bases, build_corpus, load_corpus, save_adapter
from .tasks import make_task_suite
from .workers import worker_count

log = logging.getLogger("forge")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4
GENERATOR = Path("model") / "generator.ckpt"
EVAL_COLUMNS = ["base_version", "split", "task_id", "mode", "zero_shot", "trained", "generated_mean", "generated_min", "generated_max", "n_seeds"]


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _corpus(out: Path) -> Corpus:
    return load_corpus(out / "corpus")


def _generator(out: Path) -> pl.Generator:
    path = out / GENERATOR
    if not path.exists():
        raise container.ArtifactError(f"missing generator checkpoint {path}; run `forge train` first")
    return pl.load_generator(path)


def _splits(cfg: ExperimentConfig) -> dict[str, str]:
    return {**{v: "train" for v in cfg.corpus.train_versions}, **{v: "heldout" for v in cfg.corpus.heldout_versions}}


def _pct(x: float) -> str:
    return f"{100.0 * x:6.2f}"


def cmd_corpus(cfg: ExperimentConfig, out: Path, args) -> int:
    root = out / "corpus"
    manifest = build_corpus(cfg, root)
    report.write_config_echo(root, cfg.to_dict(), {"command": "corpus"})
    rows = manifest["entries"]
    report.write_csv(root / "corpus.csv", rows, ["base_version", "task_id", "seed", "rank", "split", "eval_accuracy", "zero_shot", "sha256"])
    lines = [f"entries: {len(rows)}", f"manifest hash: {manifest['hash']}", ""]
    for v in manifest["train_versions"] + manifest["heldout_versions"]:
        for t in manifest["tasks"]:
            sel = [r for r in rows if r["base_version"] == v and r["task_id"] == t]
            lines.append(f"{v} {t:<11} trained {_pct(np.mean([r['eval_accuracy'] for r in sel]))}  zero-shot {_pct(sel[0]['zero_shot'])}")
    report.write_summary(root / "summary.txt", "Corpus", lines)
    print(f"corpus: {len(rows)} adapters written to {root}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    corpus = _corpus(out)
    entries = corpus.split("train")
    gen = pl.train_generator(cfg, corpus.bases, corpus.tasks, entries, progress=lambda i, l: log.info("iteration %d loss %.5f", i, l))
    path = out / GENERATOR
    sha = pl.save_generator(path, gen)
    d = path.parent
    report.write_config_echo(d, cfg.to_dict(), {"command": "train", "corpus_hash": corpus.manifest["hash"], "checkpoint_sha256": sha})
    curve = [{"iteration": i, "loss": l} for i, l in gen.loss_curve]
    report.write_csv(d / "loss.csv", curve, ["iteration", "loss"])
    report.line_chart(d / "loss.svg", [c["iteration"] for c in curve], {"diffusion loss": [c["loss"] for c in curve]},
                      "iteration", "mean loss", "Training loss", logy=True)
    report.write_summary(d / "summary.txt", "Diffusion training", [
        f"training checkpoints: {len(entries)}",
        f"iterations: {cfg.train.iterations}",
        f"final loss: {gen.loss_curve[-1][1]:.5f}" if gen.loss_curve else "final loss: n/a",
        f"checkpoint sha256: {sha}",
    ])
    print(f"train: generator written to {path}")
    return EXIT_OK


def cmd_generate(cfg: ExperimentConfig, out: Path, args) -> int:
    gen = _generator(out)
    corpus = _corpus(out)
    versions = [args.base_version] if args.base_version else corpus.manifest["train_versions"] + corpus.manifest["heldout_versions"]
    task_ids = [args.task] if args.task else [t.task_id for t in corpus.tasks]
    for v in versions:
        if v not in corpus.bases:
            raise ConfigError(f"unknown base version {v!r}; corpus has {sorted(corpus.bases)}")
    tasks = []
    for tid in task_ids:
        try:
            tasks.append(corpus.task(tid))
        except KeyError:
            raise ConfigError(f"unknown task {tid!r}") from None
    n = args.n_seeds or gen.cfg.eval.n_seeds
    cells = [(corpus.bases[v], t, i) for v in versions for t in tasks for i in range(n)]
    with np.errstate(over="ignore", invalid="ignore"):
        adapters = pl.generate_adapters(gen, cells)
    root = out / "generated"
    rows = []
    for (base, task, i), ad in zip(cells, adapters):
        rel = f"{base.version_id}/{task.task_id}/{i}.ckpt"
        sha = save_adapter(root / rel, ad, {"sample_index": i})
        rows.append({"base_version": base.version_id, "task_id": task.task_id, "sample": i, "path": rel, "sha256": sha})
    report.write_config_echo(root, gen.cfg.to_dict(), {"command": "generate", "versions": versions, "tasks": task_ids, "n_seeds": n})
    report.write_csv(root / "generated.csv", rows, ["base_version", "task_id", "sample", "path", "sha256"])
    print(f"generate: {len(rows)} adapters written to {root}")
    return EXIT_OK


def _eval_summary(rows: list[dict], title_rows: str) -> list[str]:
    lines = [title_rows, f"{'version':<8}{'task':<12}{'zero-shot':>10}{'trained':>10}{'gen mean':>10}{'gen min':>10}{'gen max':>10}"]
    for r in rows:
        lines.append(f"{r['base_version']:<8}{r['task_id']:<12}{_pct(r['zero_shot']):>10}{_pct(r['trained']):>10}"
                     f"{_pct(r['generated_mean']):>10}{_pct(r['generated_min']):>10}{_pct(r['generated_max']):>10}")
    return lines


def _task_means(rows: list[dict]) -> list[str]:
    lines = [f"{'task':<12}{'zero-shot':>10}{'trained':>10}{'generated':>10}{'gap':>8}"]
    for tid, m in pl.summarize_by_task(rows).items():
        lines.append(f"{tid:<12}{_pct(m['zero_shot']):>10}{_pct(m['trained']):>10}{_pct(m['generated_mean']):>10}"
                     f"{100 * (m['generated_mean'] - m['trained']):>8.2f}")
    return lines


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    gen = _generator(out)
    corpus = _corpus(out)
    m = corpus.manifest
    rows = pl.evaluate(gen, corpus.bases, corpus.tasks, corpus.entries, m["train_versions"] + m["heldout_versions"], splits=_splits(gen.cfg))
    d = out / "reports" / "eval"
    report.write_config_echo(d, gen.cfg.to_dict(), {"command": "eval", "corpus_hash": m["hash"]})
    report.write_csv(d / "eval.csv", rows, EVAL_COLUMNS)
    train_rows = [r for r in rows if r["split"] == "train"]
    held_rows = [r for r in rows if r["split"] == "heldout"]
    lines = ["Mean over training base versions:", *_task_means(train_rows), ""]
    if held_rows:
        lines += ["Mean over held-out base versions:", *_task_means(held_rows), ""]
    lines += _eval_summary(rows, "All cells (accuracy %, generated over seeds):")
    report.write_summary(d / "summary.txt", "Generated vs trained LoRA accuracy", lines)
    for name, sel in (("train", train_rows), ("heldout", held_rows)):
        if not sel:
            continue
        means = pl.summarize_by_task(sel)
        tids = list(means)
        report.grouped_bars(d / f"eval_{name}.svg", tids,
                            {"zero-shot": [means[t]["zero_shot"] for t in tids],
                             "trained": [means[t]["trained"] for t in tids],
                             "generated": [means[t]["generated_mean"] for t in tids]},
                            "accuracy", f"{name} base versions")
    print(f"eval: report written to {d}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> int:
    gen = _generator(out)
    corpus = _corpus(out)
    m = corpus.manifest
    modes = pl.MODES if args.mode == "all" else ("real", args.mode) if args.mode != "real" else ("real",)
    results = pl.ablate(gen, corpus.bases, corpus.tasks, corpus.entries, m["train_versions"], modes)
    rows = [r for mode in modes for r in results[mode]]
    d = out / "reports" / "ablate"
    report.write_config_echo(d, gen.cfg.to_dict(), {"command": "ablate", "modes": list(modes)})
    report.write_csv(d / "ablate.csv", rows, EVAL_COLUMNS)
    real = float(np.mean([r["generated_mean"] for r in results["real"]]))
    lines = [f"{'conditioning':<14}{'mean acc':>10}{'delta':>9}"]
    means = {}
    for mode in modes:
        means[mode] = float(np.mean([r["generated_mean"] for r in results[mode]]))
        lines.append(f"{mode:<14}{_pct(means[mode]):>10}{100 * (means[mode] - real):>9.2f}")
    report.write_summary(d / "summary.txt", "Condition ablation (training base versions)", lines)
    tids = [t.task_id for t in corpus.tasks]
    series = {mode: [pl.summarize_by_task(results[mode])[t]["generated_mean"] for t in tids] for mode in modes}
    report.grouped_bars(d / "ablate.svg", tids, series, "generated accuracy", "Conditioning ablation")
    print(f"ablate: report written to {d}")
    return EXIT_OK


def cmd_ranksweep(cfg: ExperimentConfig, out: Path, args) -> int:
    root = out / "corpus"
    if (root / "manifest.json").exists():
        corpus = load_corpus(root)
        bases, tasks = corpus.bases, corpus.tasks
    else:
        tasks = make_task_suite(cfg.seed, cfg.base.d_in, cfg.corpus.tasks)
        bases = build_bases(cfg, tasks)
    rows = pl.rank_sweep(cfg, bases, tasks, progress=log.info)
    d = out / "reports" / "ranksweep"
    report.write_config_echo(d, cfg.to_dict(), {"command": "ranksweep"})
    report.write_csv(d / "ranksweep.csv", rows, ["rank", *EVAL_COLUMNS])
    ranks = list(cfg.ranksweep.ranks)
    lines = [f"{'rank':>5}  {'task':<11}{'zero-shot':>10}{'trained':>10}{'generated':>10}{'gap':>8}"]
    series = {}
    for tid in cfg.ranksweep.tasks:
        for r in ranks:
            m = pl.summarize_by_task([x for x in rows if x["rank"] == r and x["task_id"] == tid])[tid]
            lines.append(f"{r:>5}  {tid:<11}{_pct(m['zero_shot']):>10}{_pct(m['trained']):>10}{_pct(m['generated_mean']):>10}"
                         f"{100 * (m['generated_mean'] - m['trained']):>8.2f}")
            series.setdefault(f"{tid} trained", []).append(m["trained"])
            series.setdefault(f"{tid} generated", []).append(m["generated_mean"])
    report.write_summary(d / "summary.txt", "Rank sweep (training base versions)", lines)
    report.line_chart(d / "ranksweep.svg", ranks, series, "LoRA rank", "accuracy", "Accuracy across ranks", logx=True)
    print(f"ranksweep: report written to {d}")
    return EXIT_OK


COMMANDS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "ranksweep": cmd_ranksweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forge", description="Generate LoRA adapters by conditional recurrent diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--out", type=Path, default=Path("forge-run"), help="run directory (default: ./forge-run)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "generate":
            p.add_argument("--base-version", help="only this base version")
            p.add_argument("--task", help="only this task id")
            p.add_argument("--n-seeds", type=int, help="samples per cell (default: eval.n_seeds)")
        if name == "ablate":
            p.add_argument("--mode", choices=("all", *pl.MODES), default="all")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        worker_count()  # reject a malformed FORGE_THREADS before any work starts
        return COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as e:
        print(f"forge: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except container.ArtifactError as e:
        print(f"forge: artifact error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except TrainingError as e:
        print(f"forge: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
