import json

import pytest

from forge.config import ConfigError, ExperimentConfig


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg
    assert cfg.eval.n_seeds == 3 and cfg.eval.aggregate == "mean"


def test_partial_file_merges_over_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 7, "train": {"iterations": 10}}))
    cfg = ExperimentConfig.load(p)
    assert cfg.seed == 7 and cfg.train.iterations == 10 and cfg.train.lr == ExperimentConfig().train.lr


@pytest.mark.parametrize(
    "bad",
    [
        {"nope": 1},
        {"train": {"iterations": "many"}},
        {"corpus": {"tasks": ["not_a_task"]}},
        {"tokenizer": {"pos_dim": 3}},
        {"model": {"kernel": 4}},
        {"corpus": {"train_versions": ["t0"], "heldout_versions": ["t0"]}},
        {"seed": True},
    ],
)
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(**bad) if "nope" not in bad else ExperimentConfig.from_dict(bad)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "bad.json")
