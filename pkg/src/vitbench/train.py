"""Adam optimization, the training loop, the pretrain/fine-tune transfer
workflow, evaluation, and the comparison-report CSV."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .checkpoint import Checkpoint, load_params_into, snapshot_params
from .cnn import CNN_KINDS, CnnConfig, CnnModel
from .errors import (
    ConfigurationError,
    ContractError,
    EmptyDatasetError,
    TrainingError,
)
from .tensor import Tape, Tensor, backward, cross_entropy
from .vit import ViTClassifier, ViTConfig


def make_model(kind: str, config: dict, seed: int = 0):
    """Build a model of the given kind from a plain config dict."""
    if kind == "vit":
        return ViTClassifier(ViTConfig(**config), seed=seed)
    if kind in CNN_KINDS:
        cfg = dict(config)
        cfg["kind"] = kind
        return CnnModel(CnnConfig(**cfg), seed=seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 75
    lr: float = 0.001
    seed: int = 0
    freeze_backbone: bool = False
    augment: D.AugmentConfig = field(default_factory=D.AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError(
                f"invalid TrainConfig: epochs={self.epochs}, "
                f"batch_size={self.batch_size}, lr={self.lr}"
            )


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / b1t
            v_hat = v / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


@dataclass
class MetricsRecord:
    model: str
    dataset: str
    epoch: int
    split: str        # train | val | test
    accuracy: float
    loss: float


class ConfusionMatrix:
    """C x C counts, rows = true class, cols = predicted class."""

    def __init__(self, num_classes: int):
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, true_label: int, predicted: int) -> None:
        self.counts[true_label, predicted] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    # binary views, class 1 is positive
    @property
    def tp(self) -> int:
        return int(self.counts[1, 1])

    @property
    def tn(self) -> int:
        return int(self.counts[0, 0])

    @property
    def fp(self) -> int:
        return int(self.counts[0, 1])

    @property
    def fn(self) -> int:
        return int(self.counts[1, 0])


def _dataset_name(manifest: D.DatasetManifest) -> str:
    for suffix in ("-train", "-val", "-test"):
        if manifest.name.endswith(suffix):
            return manifest.name[: -len(suffix)]
    return manifest.name


def evaluate(model, manifest: D.DatasetManifest,
             cache: D.ImageCache | None = None,
             epoch: int = 0, split: str = "val"):
    """Deterministic inference pass -> (MetricsRecord, ConfusionMatrix)."""
    if not manifest.entries:
        raise EmptyDatasetError(f"cannot evaluate on empty manifest {manifest.name!r}")
    cm = ConfusionMatrix(manifest.num_classes)
    total_loss = 0.0
    batches = D.make_batches(manifest, batch_size=64, shuffle=False, cache=cache)
    n = 0
    for batch in batches:
        logits = model.forward_batch(batch.images)
        loss = cross_entropy(logits, batch.labels)
        total_loss += loss.item() * len(batch.labels)
        preds = np.argmax(logits.data, axis=1)
        for lab, pred in zip(batch.labels, preds):
            cm.add(int(lab), int(pred))
        n += len(batch.labels)
    record = MetricsRecord(
        model=model.kind, dataset=_dataset_name(manifest),
        epoch=epoch, split=split,
        accuracy=cm.accuracy, loss=total_loss / n,
    )
    return record, cm


def _trainable_params(model, cfg: TrainConfig) -> dict:
    if cfg.freeze_backbone:
        return {k: model.params[k] for k in model.head_names()}
    return dict(model.params)


def train(model, train_manifest: D.DatasetManifest,
          val_manifest: D.DatasetManifest | None, cfg: TrainConfig,
          cache: D.ImageCache | None = None,
          stop_at_train_acc: float | None = None) -> list[MetricsRecord]:
    """Epoch loop: shuffled batches, cross-entropy, backward, Adam step,
    then one validation pass per epoch."""
    if not train_manifest.entries:
        raise EmptyDatasetError("training manifest is empty")
    cache = cache or D.ImageCache()
    opt = Adam(_trainable_params(model, cfg), lr=cfg.lr)
    history: list[MetricsRecord] = []
    if hasattr(model, "train_mode"):
        model.train_mode = True
    try:
        for epoch in range(cfg.epochs):
            batches = D.make_batches(
                train_manifest, cfg.batch_size, seed=cfg.seed, shuffle=True,
                epoch=epoch, cache=cache, augment_cfg=cfg.augment,
            )
            epoch_loss = 0.0
            correct = 0
            seen = 0
            for b_idx, batch in enumerate(batches):
                opt.zero_grad()
                with Tape() as tape:
                    logits = model.forward_batch(batch.images)
                    loss = cross_entropy(logits, batch.labels)
                if not np.isfinite(loss.item()):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b_idx}"
                    )
                backward(loss, tape)
                opt.step()
                epoch_loss += loss.item() * len(batch.labels)
                correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
                seen += len(batch.labels)
            train_acc = correct / seen
            history.append(MetricsRecord(
                model=model.kind, dataset=_dataset_name(train_manifest),
                epoch=epoch, split="train",
                accuracy=train_acc, loss=epoch_loss / seen,
            ))
            if val_manifest is not None and val_manifest.entries:
                if hasattr(model, "train_mode"):
                    model.train_mode = False
                rec, _ = evaluate(model, val_manifest, cache=cache,
                                  epoch=epoch, split="val")
                if hasattr(model, "train_mode"):
                    model.train_mode = True
                history.append(rec)
            if stop_at_train_acc is not None and train_acc >= stop_at_train_acc:
                break
    finally:
        if hasattr(model, "train_mode"):
            model.train_mode = False
    return history


def pretrain(kind: str, model_config: dict,
             surrogate_manifest: D.DatasetManifest, cfg: TrainConfig) -> Checkpoint:
    """Train from random init on the surrogate task and package a checkpoint."""
    if surrogate_manifest.num_classes < 2:
        raise ConfigurationError("surrogate dataset needs at least 2 classes")
    model = make_model(kind, model_config, seed=cfg.seed)
    history = train(model, surrogate_manifest, None, cfg)
    return Checkpoint(
        kind=kind,
        config=model.config.to_dict(),
        params=snapshot_params(model),
        metadata={
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "source_dataset": surrogate_manifest.name,
            "adam": Adam({}, lr=cfg.lr).hyperparams(),
            "final_train_loss": history[-1].loss if history else None,
        },
    )


def fine_tune(ckpt: Checkpoint, target_manifest: D.DatasetManifest,
              cfg: TrainConfig, val_manifest: D.DatasetManifest | None = None):
    """Backbone from checkpoint, fresh head sized for the target classes."""
    config = dict(ckpt.config)
    config["num_classes"] = target_manifest.num_classes
    if ckpt.kind in CNN_KINDS:
        config.pop("kind", None)
    model = make_model(ckpt.kind, config, seed=cfg.seed)
    backbone = model.backbone_names()
    expected_backbone = {n for n in ckpt.params if not n.startswith("head.")}
    if set(backbone) != expected_backbone:
        missing = sorted(set(backbone) - expected_backbone)
        extra = sorted(expected_backbone - set(backbone))
        raise ConfigurationError(
            f"checkpoint/config mismatch: missing {missing}, extra {extra}"
        )
    load_params_into(model, ckpt.params, names=backbone)
    history = train(model, target_manifest, val_manifest, cfg)
    return model, history


# ---------------------------------------------------------------------------
# comparison report


CSV_HEADER = "model,dataset,epoch,split,accuracy,loss"


def emit_comparison(records: list[MetricsRecord], out_path) -> None:
    """Write the comparison CSV: accuracy as a percentage with 2 decimals,
    loss with 2 decimals, rows sorted, best-val footer per dataset."""
    rows = sorted(records, key=lambda r: (r.dataset, r.model, r.epoch, r.split))
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.model},{r.dataset},{r.epoch},{r.split},"
            f"{r.accuracy * 100.0:.2f},{r.loss:.2f}"
        )
    best: dict[str, MetricsRecord] = {}
    for r in rows:
        if r.split != "val":
            continue
        cur = best.get(r.dataset)
        if cur is None or r.accuracy > cur.accuracy:
            best[r.dataset] = r
    for ds in sorted(best):
        r = best[ds]
        lines.append(
            f"# best val: dataset={ds} model={r.model} "
            f"epoch={r.epoch} accuracy={r.accuracy * 100.0:.2f}"
        )
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_comparison(path) -> list[MetricsRecord]:
    """Read back a comparison CSV (footer comments ignored)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ConfigurationError(f"unexpected CSV header {header!r}")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            model, dataset, epoch, split, acc, loss = line.split(",")
            records.append(MetricsRecord(
                model=model, dataset=dataset, epoch=int(epoch), split=split,
                accuracy=float(acc) / 100.0, loss=float(loss),
            ))
    return records
