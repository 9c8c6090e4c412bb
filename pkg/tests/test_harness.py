import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evmamba.cli import main
from evmamba.config import (
    Config, ConfigError, DataConfig, ModelConfig, TrainConfig, apply_overrides,
)
from evmamba.events import CATEGORY_NAMES, EventStream, synthesize_stream, write_stream
from evmamba.harness import (
    category_names, evaluate, generate_dataset, inspect_sample, load_model, load_split,
    lr_at, read_index, sample_seed, save_model, train,
)
from evmamba.model import EVMamba
from evmamba.metrics import MetricsReport, topk_accuracy, topk_predictions
from evmamba.representation import default_cell_size
from oracles import chain_argmax


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def small_config(**model):
    cfg = Config()
    cfg.data = DataConfig(categories=list(CATEGORY_NAMES[:2]), train_per_category=6,
                          test_per_category=4)
    m = dict(input_height=16, input_width=16, dim=8, depth=1, state_size=4, frames=2,
             tokens=4, clips=4, categories=2)
    m.update(model)
    for k, v in m.items():
        setattr(cfg.model, k, v)
    cfg.train = TrainConfig(epochs=2, batch_size=4)
    return cfg


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_dataset(small_config().data, root)
    return root


# -- generation ------------------------------------------------------------------------

def test_gen_writes_full_layout(tmp_path):
    n = generate_dataset(DataConfig(), tmp_path)
    assert n == 1500
    assert len(list(tmp_path.rglob("*.evt"))) == 1500
    train_rows, test_rows = read_index(tmp_path, "train"), read_index(tmp_path, "test")
    assert len(train_rows) == 1000 and len(test_rows) == 500
    assert all(p.exists() for p, _, _ in train_rows + test_rows)
    assert category_names(tmp_path) == list(CATEGORY_NAMES)
    meta = json.loads((tmp_path / "dataset.json").read_text())
    assert meta["train_per_category"] == 200 and meta["seed"] == 0


def test_gen_is_deterministic(tmp_path):
    data = small_config().data
    generate_dataset(data, tmp_path / "a")
    generate_dataset(data, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    data.seed = 1
    generate_dataset(data, tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_gen_rejects_empty_split(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(DataConfig(test_per_category=0), tmp_path)
    with pytest.raises(ConfigError):
        generate_dataset(DataConfig(categories=["rotating_dot"]), tmp_path)
    with pytest.raises(ConfigError):
        generate_dataset(DataConfig(categories=["rotating_dot", "spiral"]), tmp_path)


def test_sample_seeds_are_distinct():
    seeds = {sample_seed(0, s, c, i) for s in ("train", "test") for c in range(5)
             for i in range(50)}
    assert len(seeds) == 500


# -- training -----------------------------------------------------------------------

def test_zero_epochs_writes_initial_checkpoint(small_dataset, tmp_path):
    cfg = small_config()
    cfg.train.epochs = 0
    history, model = train(cfg, small_dataset, tmp_path)
    assert history == []
    assert (tmp_path / "train_log.jsonl").read_text() == ""
    loaded, loaded_cfg = load_model(tmp_path)
    assert loaded_cfg.to_dict() == cfg.to_dict()
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)


def test_train_logs_one_record_per_epoch(small_dataset, tmp_path):
    cfg = small_config()
    seen = []
    history, _ = train(cfg, small_dataset, tmp_path, on_epoch=seen.append)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == len(history) == len(seen) == 2
    recs = [json.loads(line) for line in lines]
    assert [r["epoch"] for r in recs] == [1, 2]
    for r in recs:
        assert set(r) == {"epoch", "mean_loss", "test_top1", "test_top5", "seconds"}
        assert math.isfinite(r["mean_loss"]) and 0 <= r["test_top1"] <= 1


def test_train_keeps_best_checkpoint(small_dataset, tmp_path):
    cfg = small_config()
    cfg.train.epochs = 3
    history, _ = train(cfg, small_dataset, tmp_path)
    model, mcfg = load_model(tmp_path / "model.ckpt")
    items, labels = load_split(small_dataset, "test", mcfg.model)
    best = max(r["test_top1"] for r in history)
    assert evaluate(model, items, labels).top1 == best


def test_train_stop_at(small_dataset):
    cfg = small_config()
    cfg.train.epochs = 5
    cfg.train.stop_at = 1e-9
    history, _ = train(cfg, small_dataset)
    assert len(history) == 1


def test_train_category_mismatch(small_dataset):
    with pytest.raises(ConfigError):
        train(small_config(categories=3), small_dataset)


def test_train_is_repeatable(small_dataset):
    a, _ = train(small_config(), small_dataset)
    b, _ = train(small_config(), small_dataset)
    assert [r["mean_loss"] for r in a] == [r["mean_loss"] for r in b]


def test_cosine_schedule():
    tc = TrainConfig(lr=0.1)
    assert lr_at(tc, 0, 100) == pytest.approx(0.1)
    assert lr_at(tc, 50, 100) == pytest.approx(0.05)
    assert lr_at(tc, 100, 100) == pytest.approx(0.0, abs=1e-15)
    tc.schedule = "constant"
    assert lr_at(tc, 70, 100) == 0.1


def test_paper_scale_values():
    tc = TrainConfig.paper_scale()
    assert (tc.epochs, tc.lr, tc.weight_decay) == (30, 0.001, 0.0001)
    mc = ModelConfig.paper_scale()
    assert (mc.depth, mc.frames, mc.input_height, mc.input_width) == (33, 8, 224, 224)


# -- metrics ---------------------------------------------------------------------------

def test_perfect_predictions():
    labels = np.repeat(np.arange(4), 3)
    logits = np.eye(4)[labels] * 5
    r = MetricsReport.from_logits(logits, labels, 4)
    assert r.top1 == r.top5 == 1.0
    np.testing.assert_array_equal(r.confusion, np.diag([3] * 4))


def test_constant_logits_score_chance():
    labels = np.repeat(np.arange(5), 20)
    r = MetricsReport.from_logits(np.zeros((100, 5)), labels, 5)
    assert r.top1 == pytest.approx(1 / 5)
    assert r.top5 == 1.0
    # ties resolve to the lowest index
    assert np.array(r.confusion)[:, 0].sum() == 100


def test_topk_tie_order():
    np.testing.assert_array_equal(topk_predictions([[1, 3, 3, 0]], 3), [[1, 2, 0]])
    assert topk_accuracy([[0.0, 0.0]], [1], 1) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 40), st.integers(0, 2**32 - 1))
def test_report_invariants(n, count, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((count, n)).round(1)
    labels = rng.integers(0, n, count)
    r = MetricsReport.from_logits(logits, labels, n)
    cm = np.array(r.confusion)
    assert cm.sum() == count == r.sample_count
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels, minlength=n))
    assert 0 <= r.top1 <= r.top5 <= 1
    if n <= 5:
        assert r.top5 == (1.0 if count else 0.0)


def test_confusion_csv():
    r = MetricsReport.from_logits(np.eye(2), [0, 1], 2, names=["a", "b"])
    assert r.confusion_csv() == "true\\pred,a,b\na,1,0\nb,0,1\n"


# -- inspection ------------------------------------------------------------------------

def test_inspect_empty_stream(tmp_path):
    path = tmp_path / "empty.evt"
    write_stream(path, EventStream.empty(32, 32))
    info = inspect_sample(path, Config().model)
    assert info["events"] == 0 and info["trajectories"] == 0
    assert info["trajectory_lengths"] == []


def test_inspect_bar_against_oracle(tmp_path):
    cfg = Config().model
    s = synthesize_stream("translating_bar", 2)
    path = tmp_path / "bar.evt"
    write_stream(path, s)
    info = inspect_sample(path, cfg)
    assert info["events"] == len(s) and info["duration_us"] == s.duration
    assert len(info["informative_per_clip"]) == cfg.clips
    half = cfg.clips // 2
    a, b, c = default_cell_size(s, cfg.clips, cfg.cells_across)
    want = chain_argmax(s, a, b, c, cfg.micro, cfg.clips, cfg.eps_min, cfg.max_voxels,
                        cfg.s_min, half)
    assert want, "oracle finds no long trajectory"
    assert sum(n >= half for n in info["trajectory_lengths"]) == len(want)


def test_inspect_delta_sweep(tmp_path):
    for i, cat in enumerate(CATEGORY_NAMES):
        path = tmp_path / f"{cat}.evt"
        write_stream(path, synthesize_stream(cat, i))
        sweep = inspect_sample(path, Config().model)["delta_sweep"]
        counts = [sweep["1"], sweep["3"], sweep["9"]]
        assert counts == sorted(counts, reverse=True)


# -- config and CLI -----------------------------------------------------------------------

def test_overrides():
    cfg = apply_overrides(Config(), ["model.dim=32", "lr=0.5", "binary=false",
                                     "data.categories=rotating_dot,zigzag_point"])
    assert cfg.model.dim == 32 and cfg.train.lr == 0.5 and cfg.data.binary is False
    assert cfg.data.categories == ["rotating_dot", "zigzag_point"]
    for bad in (["nope=1"], ["seed=3"], ["model.dim"], ["model.dim=x"], ["extra.a=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(Config(), bad)


def test_config_round_trip(tmp_path):
    cfg = small_config(fusion="concat")
    cfg.save(tmp_path / "c.json")
    assert Config.load(tmp_path / "c.json").to_dict() == cfg.to_dict()


def _error_line(capsys):
    err = capsys.readouterr().err
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: "), err
    return lines[0]


def test_cli_round_trip(tmp_path, capsys):
    cfg = small_config()
    cfg.save(tmp_path / "cfg.json")
    ds, run, ev = tmp_path / "ds", tmp_path / "run", tmp_path / "ev"
    assert main(["gen", "--config", str(tmp_path / "cfg.json"), "--seed", "4",
                 "--out", str(ds)]) == 0
    assert json.loads((ds / "dataset.json").read_text())["seed"] == 4
    assert main(["train", str(ds), "--config", str(tmp_path / "cfg.json"),
                 "--set", "train.epochs=1", "--out", str(run)]) == 0
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 1
    capsys.readouterr()
    assert main(["eval", str(run), str(ds), "--out", str(ev)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sample_count"] == 8
    assert json.loads((ev / "report.json").read_text()) == report
    assert (ev / "confusion.csv").read_text().startswith("true\\pred,")
    # evaluation is deterministic apart from wall-clock time
    main(["eval", str(run), str(ds)])
    again = json.loads(capsys.readouterr().out)
    report.pop("seconds"), again.pop("seconds")
    assert again == report
    sample = read_index(ds, "test")[0][0]
    assert main(["inspect", str(sample), "--set", "model.delta=2"]) == 0
    assert json.loads(capsys.readouterr().out)["delta"] == 2


@pytest.mark.parametrize("argv", [
    ["gen", "--set", "data.test_per_category=0", "--out", "{tmp}/x"],
    ["gen"],
    ["train", "{tmp}/missing", "--out", "{tmp}/r"],
    ["inspect", "{tmp}/missing.evt"],
    ["gen", "--set", "nope=1", "--out", "{tmp}/x"],
    ["frobnicate"],
    ["eval", "{tmp}/missing", "{tmp}/missing"],
])
def test_cli_errors_are_one_line(argv, tmp_path, capsys):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    assert main(argv) != 0
    _error_line(capsys)


def test_cli_eval_category_mismatch(small_dataset, tmp_path, capsys):
    cfg = small_config()
    cfg.model.categories = 3
    cfg.train.epochs = 0
    save_model(EVMamba(cfg.model), cfg, tmp_path)
    assert main(["eval", str(tmp_path), str(small_dataset)]) == 2
    assert "categories" in _error_line(capsys)
