"""Optimizers and the training loop.

The objective per step is ``lambda_dida * mean(DiDA loss) + lambda_contrastive
* NT-Xent`` over a batch of scenes, where the contrastive term compares two
augmented views of each scene.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import contrastive_loss, dida_forward
from .encoder import Encoder, save_checkpoint
from .evaluation import mean_iou
from .scenes import augment, split_holdout

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "dida_loss", "contrastive_loss", "mean_iou")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    lambda_dida: float = 1.0
    lambda_contrastive: float = 1.0
    eval_interval: int = 100
    seed: int = 0
    checkpoint: str | None = None
    temperature: float = 0.5
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be >= 1")
        if self.lambda_contrastive > 0 and self.batch_size < 2:
            raise ValueError("the contrastive term needs batch_size >= 2")


class SGD:
    def __init__(self, params, lr):
        self.params, self.lr = params, lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g.data


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g.data
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g.data * g.data
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def make_optimizer(name, params, lr):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


@dataclass
class TrainRecord:
    step: int
    dida_loss: float
    contrastive_loss: float
    mean_iou: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.step, repr(r.dida_loss), repr(r.contrastive_loss), repr(r.mean_iou)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="ascii")

    @classmethod
    def from_csv(cls, text: str) -> "TrainReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError("unexpected TrainReport header")
        return cls([TrainRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]])


def _views(scenes, seed, step):
    a = [augment(s, seed=(seed * 1_000_003 + 2 * step) & 0xFFFFFFFF) for s in scenes]
    b = [augment(s, seed=(seed * 1_000_003 + 2 * step + 1) & 0xFFFFFFFF) for s in scenes]
    return a, b


def batch_objective(encoder: Encoder, batch: list, config: TrainConfig, step: int):
    """Weighted objective on one batch; returns (total, mean DiDA, contrastive) with total graph-linked."""
    total = T.Tensor(0.0)
    d_mean = c_val = 0.0
    if config.lambda_dida > 0:
        losses = [dida_forward(encoder, s)[0] for s in batch]
        d = T.mul(T.sum(T.stack(losses)), 1.0 / len(losses))
        d_mean = float(d.data)
        total = T.add(total, T.mul(d, config.lambda_dida))
    if config.lambda_contrastive > 0:
        va, vb = _views(batch, config.seed, step)
        fa = [encoder(s.image).features for s in va]
        fb = [encoder(s.image).features for s in vb]
        c = contrastive_loss(fa, fb, config.temperature)
        c_val = float(c.data)
        total = T.add(total, T.mul(c, config.lambda_contrastive))
    return total, d_mean, c_val


def evaluate_heldout(encoder: Encoder, heldout: list, config: TrainConfig, step: int) -> TrainRecord:
    """Held-out means of both losses (no parameter gradients) and of the grounding IoU."""
    d_vals = [float(dida_forward(encoder, s)[0].data) for s in heldout]
    c_val = 0.0
    if len(heldout) >= 2:
        va, vb = _views(heldout, config.seed + 1, 0)
        with T.no_grad():
            c_val = float(contrastive_loss([encoder(s.image).features for s in va],
                                           [encoder(s.image).features for s in vb],
                                           config.temperature).data)
    return TrainRecord(step, float(np.mean(d_vals)), c_val, mean_iou(encoder, heldout))


def _dump(encoder, config, step, exc):
    if not config.checkpoint:
        return None
    path = f"{config.checkpoint}.diverged-step{step}"
    save_checkpoint(encoder, path)
    return path


def train(encoder: Encoder, dataset: list, config: TrainConfig) -> tuple[Encoder, TrainReport]:
    """Train in place; the last ``holdout_fraction`` of ``dataset`` is held out for evaluation."""
    if not dataset:
        raise ValueError("dataset is empty")
    train_set, heldout = split_holdout(dataset, config.holdout_fraction)
    if not train_set:
        raise ValueError("no training scenes after the held-out split")
    if not heldout:
        heldout = train_set
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, encoder.params, config.lr)
    report = TrainReport()

    def record(step):
        rec = evaluate_heldout(encoder, heldout, config, step)
        report.records.append(rec)
        log.info("step %d  dida %.4f  con %.4f  iou %.4f", rec.step, rec.dida_loss,
                 rec.contrastive_loss, rec.mean_iou)
        if config.checkpoint:
            save_checkpoint(encoder, config.checkpoint)

    record(0)
    order = np.array([], dtype=int)
    for step in range(1, config.steps + 1):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(train_set))])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        batch = [train_set[i] for i in idx]
        try:
            total, _, _ = batch_objective(encoder, batch, config, step)
            grads = T.backward(total, encoder.params)
            if not all(np.all(np.isfinite(g.data)) for g in grads):
                raise FloatingPointError("non-finite gradient")
        except FloatingPointError as exc:
            dump = _dump(encoder, config, step, exc)
            raise TrainingDiverged(f"training diverged at step {step}: {exc}"
                                   + (f"; state dumped to {dump}" if dump else ""), dump) from exc
        opt.step(grads)
        if step % config.eval_interval == 0 or step == config.steps:
            record(step)
    return encoder, report


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
