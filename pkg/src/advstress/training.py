"""Minibatch SGD training, plain and distillation-flavored."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import ForwardCtx, Model, softmax_np
from .tensor import Tape, Tensor


@dataclass
class TrainSpec:
    epochs: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    lr_decay: float = 0.5  # multiplies lr each epoch after the first
    verbose: bool = False


def evaluate_accuracy(model: Model, x: np.ndarray, y: np.ndarray,
                      batch_size: int = 256, packed: bool = True) -> float:
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    for i in range(0, len(x), batch_size):
        pred = model.predict(x[i : i + batch_size], packed=packed)
        correct += int((pred == y[i : i + batch_size]).sum())
    return correct / len(x)


def train_model(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    spec: TrainSpec,
    teacher: Model | None = None,
    temperature: float = 4.0,
    mix: float = 1.0,
) -> list[dict]:
    """Train in place; returns per-epoch history.

    With a teacher and mix alpha < 1 the loss becomes
    alpha*CE(student, labels) + (1-alpha)*T^2*KL(teacher soft || student soft)
    where soft targets are softmax(logits / T). With alpha == 1 the teacher
    term is skipped entirely, so the run is step-for-step identical to
    plain training under the same seed.
    """
    if temperature <= 0:
        raise ValueError("distillation temperature must be > 0")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("distillation mix must lie in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    opt = T.SGD(model.parameters(), lr=spec.lr, momentum=spec.momentum)
    history = []
    n = len(x)
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            xb, yb = x[idx], y[idx]
            soft_target = None
            if teacher is not None and mix < 1.0:
                t_logits = teacher.logits(Tensor(xb), ForwardCtx()).data
                soft_target = softmax_np(t_logits / temperature)
            with Tape():
                logits = model.logits(Tensor(xb), ForwardCtx(training=True))
                loss = T.softmax_cross_entropy(logits, yb)
                if soft_target is not None:
                    loss = T.add(
                        T.scale(loss, mix),
                        T.scale(
                            _kl_to_soft_target(logits, soft_target, temperature),
                            (1.0 - mix) * temperature * temperature,
                        ),
                    )
                opt.zero_grad()
                T.backward(loss)
            opt.step()
            model.apply_masks()
            model.invalidate_caches()
            epoch_loss += loss.item() * len(idx)
            seen += len(idx)
        opt.lr *= spec.lr_decay if epoch > 0 else 1.0
        record = {"epoch": epoch, "loss": epoch_loss / max(seen, 1)}
        history.append(record)
        if spec.verbose:
            print(f"epoch {epoch}: loss {record['loss']:.4f}")
    return history


def _kl_to_soft_target(logits: Tensor, soft_target: np.ndarray, temperature: float) -> Tensor:
    """Mean KL(p_teacher || softmax(logits/T)) over the batch."""
    n = soft_target.shape[0]
    log_q = T.log_softmax(T.scale(logits, 1.0 / temperature))
    p = np.clip(soft_target, 1e-12, 1.0)
    log_p = Tensor(np.log(p).astype(np.float32))
    per_entry = T.mul(Tensor(p.astype(np.float32)), T.sub(log_p, log_q))
    return T.scale(T.sum_all(per_entry), 1.0 / n)
