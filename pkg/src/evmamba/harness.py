"""Dataset generation, training, evaluation and sample inspection.

Dataset layout under a root directory::

    dataset.json                    generation settings
    train/index.csv                 sample_path,category_index,category_name
    train/<category>/<id>.evt
    test/index.csv
    test/<category>/<id>.evt

Paths in ``index.csv`` are relative to the split directory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, DataConfig, ModelConfig
from .events import read_stream, synthesize_stream, write_stream
from .metrics import MetricsReport
from .model import EVMamba, ModelInput, make_optimizer, prepare_input, train_step
from .nn import dump_checkpoint, load_checkpoint
from .tensor import no_grad
from .voxel_scan import filter_by_length, scan_stream

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
CHECKPOINT_NAME = "model.ckpt"


def sample_seed(base_seed, split, category, index):
    """Per-sample generator seed derived from the dataset seed."""
    ss = np.random.SeedSequence([base_seed, SPLITS.index(split), category, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(data: DataConfig, root):
    """Write train and test splits of synthetic streams under ``root``."""
    data.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counts = {"train": data.train_per_category, "test": data.test_per_category}
    written = 0
    for split in SPLITS:
        rows = []
        for ci, name in enumerate(data.categories):
            cat_dir = root / split / name
            cat_dir.mkdir(parents=True, exist_ok=True)
            for i in range(counts[split]):
                stream = synthesize_stream(
                    name, sample_seed(data.seed, split, ci, i), data.width, data.height,
                    data.duration_us, data.rate, data.noise_fraction, label=ci,
                )
                rel = f"{name}/{name}_{i:05d}.evt"
                write_stream(root / split / rel, stream, binary=data.binary)
                rows.append((rel, ci, name))
                written += 1
        with open(root / split / "index.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("sample_path", "category_index", "category_name"))
            w.writerows(rows)
    with open(root / "dataset.json", "w") as f:
        json.dump(asdict(data), f, indent=2, sort_keys=True)
        f.write("\n")
    return written


def read_index(root, split):
    split_dir = Path(root) / split
    with open(split_dir / "index.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    return [(split_dir / r["sample_path"], int(r["category_index"]), r["category_name"])
            for r in rows]


def category_names(root):
    names = {}
    for split in SPLITS:
        for _, ci, name in read_index(root, split):
            names[ci] = name
    return [names[i] for i in sorted(names)]


def load_split(root, split, cfg: ModelConfig):
    """Read and featurize every sample of a split."""
    items, labels = [], []
    for path, ci, _ in read_index(root, split):
        items.append(prepare_input(read_stream(path), cfg))
        labels.append(ci)
    return items, np.array(labels, dtype=np.int64)


def predict(model, items, batch_size=32):
    out = []
    with no_grad():
        for i in range(0, len(items), batch_size):
            out.append(model(ModelInput.batch(items[i:i + batch_size])).data)
    if not out:
        return np.zeros((0, model.cfg.categories))
    return np.concatenate(out)


def evaluate(model, items, labels, batch_size=32, names=None):
    t0 = time.perf_counter()
    logits = predict(model, items, batch_size)
    return MetricsReport.from_logits(logits, labels, model.cfg.categories,
                                     time.perf_counter() - t0, names)


def save_model(model, cfg: Config, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CHECKPOINT_NAME).write_bytes(dump_checkpoint(model.state_dict()))
    cfg.save(out_dir / "config.json")


def load_model(path):
    """Load a model from a run directory or a checkpoint with a sibling config.json."""
    path = Path(path)
    ckpt = path / CHECKPOINT_NAME if path.is_dir() else path
    cfg = Config.load(ckpt.parent / "config.json")
    model = EVMamba(cfg.model)
    model.load_state_dict(load_checkpoint(ckpt.read_bytes()))
    return model, cfg


def lr_at(tc, step, total):
    """Learning rate for optimizer step ``step`` of ``total``."""
    if tc.schedule == "cosine" and total > 0:
        return tc.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return tc.lr


def train(cfg: Config, dataset, out_dir=None, data=None, on_epoch=None):
    """Train on ``dataset`` and return the per-epoch history.

    Each epoch shuffles the training set with a generator seeded from
    ``cfg.train.shuffle_seed``, runs SGD steps, then evaluates top-1 on the
    test split. The best checkpoint by test top-1 (earliest on ties) is
    written to ``out_dir`` together with ``config.json`` and
    ``train_log.jsonl`` (one line per epoch). With ``stop_at`` set, training
    ends after the first epoch whose test top-1 reaches it. ``data`` may carry already
    featurized ``(train_items, train_labels, test_items, test_labels)``.
    """
    cfg.model.validate()
    cfg.train.validate()
    names = category_names(dataset)
    if len(names) != cfg.model.categories:
        raise ConfigError(
            f"dataset has {len(names)} categories but model.categories={cfg.model.categories}"
        )
    if data is None:
        data = load_split(dataset, "train", cfg.model) + load_split(dataset, "test", cfg.model)
    tr_items, tr_labels, te_items, te_labels = data
    model = EVMamba(cfg.model)
    tc = cfg.train
    opt = make_optimizer(model, tc.lr, tc.weight_decay, tc.momentum, tc.clip_norm)
    rng = np.random.default_rng(tc.shuffle_seed)

    out = Path(out_dir) if out_dir else None
    if out:
        save_model(model, cfg, out)
        (out / "train_log.jsonl").write_text("")
    best = -1.0
    history = []
    per_epoch = -(-len(tr_items) // tc.batch_size)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr_items))
        losses = []
        for i in range(0, len(order), tc.batch_size):
            idx = order[i:i + tc.batch_size]
            batch = ModelInput.batch([tr_items[j] for j in idx])
            opt.lr = lr_at(tc, step, tc.epochs * per_epoch)
            step += 1
            losses.append(train_step(model, opt, batch, tr_labels[idx]))
        report = evaluate(model, te_items, te_labels, names=names)
        rec = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "test_top1": report.top1,
            "test_top5": report.top5,
            "seconds": time.perf_counter() - t0,
        }
        history.append(rec)
        log.info("epoch %d loss %.4f top1 %.3f (%.1fs)", epoch, rec["mean_loss"],
                 rec["test_top1"], rec["seconds"])
        if on_epoch:
            on_epoch(rec)
        if out:
            with open(out / "train_log.jsonl", "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            if report.top1 > best:
                best = report.top1
                save_model(model, cfg, out)
        if tc.stop_at and report.top1 >= tc.stop_at:
            break
    return history, model


def inspect_sample(path, cfg: ModelConfig, deltas=(1, 3, 9)):
    """Event and trajectory diagnostics for one stream file."""
    stream = read_stream(path)
    scan = scan_stream(stream, cfg.clips, cfg.tokens, cfg.eps_min, cfg.max_voxels,
                       cfg.delta, cfg.s_min, cfg.micro, cfg.cells_across)
    lengths = sorted((len(t) for t in scan.kept), reverse=True)
    return {
        "path": os.fspath(path),
        "events": len(stream),
        "duration_us": stream.duration,
        "informative_per_clip": [len(s) for s in scan.sets],
        "delta": cfg.delta,
        "trajectories": len(scan.kept),
        "trajectory_lengths": lengths,
        "delta_sweep": {str(d): len(filter_by_length(scan.trajectories, d)) for d in deltas},
    }
