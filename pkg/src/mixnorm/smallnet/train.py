"""Mini-batch training loop and run records."""

import time
from dataclasses import dataclass, field

import numpy as np

from .layers import softmax_cross_entropy
from .optim import Optimizer


@dataclass
class RunRow:
    step: int
    epoch: float
    train_loss: float
    test_loss: float
    test_acc: float
    wall_seconds: float
    effective_k: tuple = ()


@dataclass
class RunRecord:
    run_id: str = ""
    seed: int = 0
    rows: list = field(default_factory=list)
    updates_per_epoch: int = 0

    def best_accuracy(self):
        return max(r.test_acc for r in self.rows)

    def steps_to_best(self):
        best = self.best_accuracy()
        return next(r.step for r in self.rows if r.test_acc >= best)


def steps_to_accuracy(record, target):
    """First gradient-update count at which test accuracy reaches ``target``,
    or None if it never does."""
    if not 0.0 < target <= 1.0:
        raise ValueError(f"target accuracy must lie in (0, 1], got {target}")
    rows = record.rows if isinstance(record, RunRecord) else record
    if not rows:
        raise ValueError("empty run record")
    for r in rows:
        if r.test_acc >= target:
            return r.step
    return None


def evaluate(net, x, y, batch_size=512):
    """Inference-mode loss and accuracy over a whole split."""
    total_loss, correct = 0.0, 0
    for start in range(0, x.shape[0], batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits = net.forward(xb, "infer")
        loss, _ = softmax_cross_entropy(logits, yb)
        total_loss += loss * xb.shape[0]
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / x.shape[0], correct / x.shape[0]


def train_step(net, optimizer, xb, yb, lr):
    logits = net.forward(xb, "train")
    loss, grad = softmax_cross_entropy(logits, yb)
    net.backward(grad)
    optimizer.step(net, lr)
    return loss


def train(net, data, optimizer, epochs, batch_size, rng, eval_hook=None, evals_per_epoch=1,
          augment=None, on_row=None, run_id="", seed=0):
    """Shuffled mini-batch training; the last partial batch of each epoch is
    dropped. The learning rate changes only on epoch boundaries.

    ``data`` needs ``x_train``/``y_train`` and, without ``eval_hook``,
    ``x_test``/``y_test``. ``eval_hook(net)`` returns (test loss, test
    accuracy). ``on_row`` receives each RunRow as it is produced.
    """
    x, y = data.x_train, data.y_train
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ValueError(f"batch size {batch_size} exceeds the {n} training samples")
    if eval_hook is None:
        def eval_hook(model):
            return evaluate(model, data.x_test, data.y_test)
    eval_at = set(np.linspace(0, per_epoch, evals_per_epoch + 1).round().astype(int)[1:].tolist())

    opt = Optimizer(optimizer)
    record = RunRecord(run_id, seed, updates_per_epoch=per_epoch)
    step = 0
    wall = 0.0
    losses = []
    for epoch in range(epochs):
        lr = optimizer.lr_at(epoch, epochs)
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            xb, yb = x[idx], y[idx]
            if augment is not None:
                xb = augment(xb, rng)
            t0 = time.perf_counter()
            losses.append(train_step(net, opt, xb, yb, lr))
            wall += time.perf_counter() - t0
            step += 1
            if b + 1 in eval_at:
                test_loss, test_acc = eval_hook(net)
                row = RunRow(step, epoch + (b + 1) / per_epoch, float(np.mean(losses)),
                             float(test_loss), float(test_acc), wall, tuple(net.effective_k()))
                losses = []
                record.rows.append(row)
                if on_row is not None:
                    on_row(row)
    return record
