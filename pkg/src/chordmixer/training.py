"""Training loop, evaluation metrics, percentile reporting, checkpoints.

A full run is a pure function of (config, seed): data generation,
splits, batch order, dropout, and initialization all derive from one
root seed, and per-epoch streams are keyed by the epoch index so a
resumed run consumes exactly the randomness the original would have.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Adam, Rng, clip_gradients, mse_loss, weighted_cross_entropy
from .data import (
    batched_forward,
    bucket_batches,
    gen_adding,
    item_length,
    load_adding,
    load_labeled,
    save_adding,
    split,
)
from .model import ChordMixerNet, load_checkpoint, net_forward, save_checkpoint
from .topology import ceil_log2

TRAINER_STATE_MAGIC = b"CHOP1"
SPLIT_FRACTIONS = (0.7, 0.2, 0.1)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    """Everything a training run needs; d is track_size times the block count."""

    task: str = "regression"          # regression | classification
    data: str = None                  # dataset path; regression may generate instead
    lam: float = None                 # adding-problem base length (generation)
    count: int = None                 # adding-problem instance count (generation)
    track_size: int = 16
    hidden: int = 128
    dropout: float = 0.0
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    eval_every: int = 1
    n_max: int = None                 # inferred from data when unset
    head: str = "avg"
    clip: float = 0.0                 # 0 disables gradient clipping
    eval_bins: int = 10
    out: str = "runs/run"
    resume: bool = False

    def validate(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and not self.data:
            raise ValueError("classification requires a dataset path")
        if self.task == "regression" and not self.data and (self.lam is None or self.count is None):
            raise ValueError("regression requires a dataset path or lambda and count")
        for name in ("track_size", "hidden", "epochs", "batch_size", "eval_every", "eval_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.clip < 0:
            raise ValueError(f"clip must be >= 0, got {self.clip}")


@dataclass
class TrainResult:
    net: ChordMixerNet
    best_epoch: int
    best_val_loss: float
    metrics: list
    checkpoint_path: str
    metrics_path: str
    splits: tuple
    vocab: list = None


def roc_auc(scores, labels):
    """Rank-based (Mann-Whitney) ROC-AUC; tied scores contribute one half.

    Equals the fraction of (positive, negative) pairs the scores order
    correctly, which the tests verify by brute-force pair counting.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC is undefined when only one class is present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = float(np.sum(ranks[labels == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def percentile_report(metric_fn, instances, n_bins=10):
    """Per-length-percentile metric values over equal-count bins.

    Instances are sorted by length and cut into ``n_bins`` contiguous
    bins (remainders go to the earlier bins); ``metric_fn`` receives
    each bin's index array. Returns one dict per bin with the length
    range, the count, and the metric value.
    """
    if len(instances) == 0:
        raise ValueError("cannot report percentiles of an empty split")
    lengths = np.array([item_length(item) for item in instances])
    order = np.argsort(lengths, kind="stable")
    n_bins = min(n_bins, len(instances))
    base, extra = divmod(len(instances), n_bins)
    report = []
    start = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        idx = order[start:start + size]
        start += size
        report.append({
            "lo": int(lengths[idx].min()),
            "hi": int(lengths[idx].max()),
            "count": int(size),
            "value": metric_fn(idx),
        })
    return report


def class_weights(labels, n_classes):
    """Balanced weights total / (C * count_c) from training-split labels."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes {missing} have no training instances")
    return (len(labels) / (n_classes * counts)).astype(np.float64)


def _raw_input(item, task):
    return item.features() if task == "regression" else item.symbols


def _instance_loss(pred, item, task, weights):
    if task == "regression":
        return mse_loss(pred, np.array([item.y]))
    return weighted_cross_entropy(pred, item.label, weights)


def evaluate(net, items, task, n_bins=10, weights=None):
    """Loss plus task metric over a split, with a per-length-percentile table.

    Runs each instance through the plain forward pass (dropout off, no
    batching), so results depend only on the parameters and the data.
    """
    if len(items) == 0:
        raise ValueError("cannot evaluate an empty split")
    losses = np.empty(len(items))
    if task == "regression":
        preds = np.empty(len(items))
        targets = np.empty(len(items))
        for i, item in enumerate(items):
            out, _ = net_forward(item.features(), net)
            preds[i] = out.data[0]
            targets[i] = item.y
            losses[i] = (preds[i] - targets[i]) ** 2
        correct = np.abs(preds - targets) < 0.04
        record = {
            "count": len(items),
            "loss": float(np.mean(losses)),
            "metric": "tolerance_accuracy",
            "value": float(np.mean(correct)),
            "percentiles": percentile_report(
                lambda idx: float(np.mean(correct[idx])), items, n_bins),
        }
        return record

    labels = np.array([item.label for item in items])
    hits = np.empty(len(items), dtype=bool)
    pos_scores = np.empty(len(items))
    for i, item in enumerate(items):
        out, _ = net_forward(item.symbols, net)
        logits = out.data
        losses[i] = _ce_value(logits, item.label, weights)
        hits[i] = int(np.argmax(logits)) == item.label
        if net.n_outputs == 2:
            shifted = logits - logits.max()
            pos_scores[i] = np.exp(shifted[1]) / np.exp(shifted).sum()
    binary = net.n_outputs == 2 and len(np.unique(labels)) == 2

    def bin_metric(idx):
        if not binary:
            return float(np.mean(hits[idx]))
        if len(np.unique(labels[idx])) < 2:
            return None  # AUC undefined within a single-class bin
        return roc_auc(pos_scores[idx], labels[idx])

    record = {
        "count": len(items),
        "loss": float(np.mean(losses)),
        "metric": "roc_auc" if binary else "accuracy",
        "value": roc_auc(pos_scores, labels) if binary else float(np.mean(hits)),
        "accuracy": float(np.mean(hits)),
        "percentiles": percentile_report(bin_metric, items, n_bins),
    }
    return record


def _ce_value(logits, label, weights):
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    w = 1.0 if weights is None else float(weights[label])
    return -w * (shifted[label] - log_z)


def _load_dataset(config, root_rng, out_dir):
    """Resolve the configured dataset into (instances, vocab, labels)."""
    if config.task == "classification":
        sequences, vocab = load_labeled(config.data)
        return sequences, vocab, [s.label for s in sequences]
    if config.data:
        return load_adding(config.data), None, None
    instances = gen_adding(config.count, config.lam, root_rng.split("data"))
    generated_path = os.path.join(out_dir, "dataset.add1")
    save_adding(instances, generated_path)  # keep the data for later eval runs
    return instances, None, None


def make_splits(dataset, root_rng, stratify):
    return split(dataset, SPLIT_FRACTIONS, stratify=stratify, rng=root_rng.split("split"))


def build_net(config, dataset, vocab):
    """Instantiate the network for a config, inferring n_max from the data."""
    max_len = max(item_length(item) for item in dataset)
    n_max = config.n_max if config.n_max is not None else max_len
    if max_len > n_max:
        raise ValueError(f"dataset length {max_len} exceeds configured n_max {n_max}")
    n_blocks = max(1, ceil_log2(max(2, n_max)))
    d = config.track_size * n_blocks
    if config.task == "classification":
        n_outputs = max(s.label for s in dataset) + 1
        if min(s.label for s in dataset) < 0 or n_outputs < 2:
            raise ValueError("labels must be non-negative with at least two classes")
        return ChordMixerNet(max(2, n_max), d, config.hidden, n_outputs,
                             vocab_size=len(vocab), head=config.head,
                             dropout_rate=config.dropout, seed=config.seed,
                             track_size=config.track_size)
    return ChordMixerNet(max(2, n_max), d, config.hidden, 1, in_channels=2,
                         head=config.head, dropout_rate=config.dropout,
                         seed=config.seed, track_size=config.track_size)


def _save_trainer_state(path, adam, epoch, best_val_loss, best_epoch):
    meta = {"epoch": epoch, "step": adam.state.step,
            "best_val_loss": best_val_loss, "best_epoch": best_epoch}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TRAINER_STATE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arrays in (adam.state.m, adam.state.v):
            for arr in arrays:
                fh.write(arr.astype("<f8").tobytes(order="C"))


def _load_trainer_state(path, adam):
    with open(path, "rb") as fh:
        magic = fh.read(len(TRAINER_STATE_MAGIC))
        if magic != TRAINER_STATE_MAGIC:
            raise ValueError(f"{path}: not a trainer state file (magic {magic!r})")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        for arrays in (adam.state.m, adam.state.v):
            for i, arr in enumerate(arrays):
                raw = fh.read(arr.size * 8)
                if len(raw) != arr.size * 8:
                    raise ValueError(f"{path}: truncated optimizer state")
                arrays[i] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes in trainer state")
    adam.state.step = meta["step"]
    return meta


def train(config, log=print):
    """Run the full training loop; returns the best network and its metrics.

    Per epoch: shuffle length buckets, sum each batch's losses, one Adam
    step per batch, then evaluate train and validation splits with
    dropout off. The checkpoint tracks the minimum validation loss. A
    non-finite loss aborts with the epoch and batch in the message.
    """
    config.validate()
    os.makedirs(config.out, exist_ok=True)
    root_rng = Rng(config.seed)
    dataset, vocab, labels = _load_dataset(config, root_rng, config.out)
    stratify = config.task == "classification"
    train_set, val_set, test_set = make_splits(dataset, root_rng, stratify)
    net = build_net(config, dataset, vocab)
    adam = Adam(net.parameters(), lr=config.lr)
    weights = (class_weights([s.label for s in train_set], net.n_outputs)
               if stratify else None)

    checkpoint_path = os.path.join(config.out, "checkpoint.chmx")
    last_path = os.path.join(config.out, "last.chmx")
    state_path = os.path.join(config.out, "trainer_state.bin")
    metrics_path = os.path.join(config.out, "metrics.jsonl")

    start_epoch = 0
    best_val_loss = np.inf
    best_epoch = -1
    metrics = []
    if config.resume:
        if not os.path.exists(last_path):
            raise FileNotFoundError(f"cannot resume: {last_path} does not exist")
        resumed = load_checkpoint(last_path)
        for p, q in zip(net.parameters(), resumed.parameters()):
            p.data = q.data
        meta = _load_trainer_state(state_path, adam)
        start_epoch = meta["epoch"] + 1
        best_val_loss = meta["best_val_loss"]
        best_epoch = meta["best_epoch"]

    mode = "a" if config.resume else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics_file:
        for epoch in range(start_epoch, config.epochs):
            epoch_rng = Rng(config.seed).split("epoch", epoch)
            drop_rng = epoch_rng.split("dropout")
            batches = bucket_batches(train_set, config.batch_size,
                                     epoch_rng.split("batches"),
                                     augment=config.head == "cls")
            started = time.perf_counter()
            for bi, bucket in enumerate(batches):
                raws = [_raw_input(item, config.task) for item in bucket.members]
                preds = batched_forward(raws, net, training=True, rng=drop_rng)
                loss = None
                for pred, item in zip(preds, bucket.members):
                    term = _instance_loss(pred, item, config.task, weights)
                    loss = term if loss is None else loss + term
                if not np.isfinite(loss.data):
                    raise DivergenceError(
                        f"loss became {float(loss.data)} at epoch {epoch}, batch {bi}")
                adam.zero_grad()
                loss.backward()
                if config.clip > 0:
                    clip_gradients(net.parameters(), config.clip)
                adam.step()
            wall = time.perf_counter() - started

            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                rows = []
                for split_name, items in (("train", train_set), ("val", val_set)):
                    record = evaluate(net, items, config.task, config.eval_bins, weights)
                    record["epoch"] = epoch
                    record["split"] = split_name
                    rows.append(record)
                    metrics.append(record)
                    metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_file.flush()
                tr, va = rows
                log(f"epoch {epoch:3d} | train loss {tr['loss']:.6f} "
                    f"{tr['metric']} {tr['value']:.4f} | val loss {va['loss']:.6f} "
                    f"{va['metric']} {va['value']:.4f} | {wall:.1f}s")
                if va["loss"] < best_val_loss:
                    best_val_loss = va["loss"]
                    best_epoch = epoch
                    save_checkpoint(net, checkpoint_path)

            save_checkpoint(net, last_path)
            _save_trainer_state(state_path, adam, epoch, best_val_loss, best_epoch)

        best_net = load_checkpoint(checkpoint_path) if best_epoch >= 0 else net
        test_record = evaluate(best_net, test_set, config.task, config.eval_bins, weights)
        test_record["epoch"] = best_epoch
        test_record["split"] = "test"
        metrics.append(test_record)
        metrics_file.write(json.dumps(test_record, sort_keys=True) + "\n")
        log(f"test  (best epoch {best_epoch}) | loss {test_record['loss']:.6f} "
            f"{test_record['metric']} {test_record['value']:.4f}")

    return TrainResult(net=best_net, best_epoch=best_epoch, best_val_loss=best_val_loss,
                       metrics=metrics, checkpoint_path=checkpoint_path,
                       metrics_path=metrics_path, splits=(train_set, val_set, test_set),
                       vocab=vocab)
