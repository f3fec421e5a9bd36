"""Three-phase SGD training: full precision, then quantized, then frozen ternary weights."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, softmax, softmax_cross_entropy
from .errors import NonFiniteError, ShapeError, TrainingDiverged, ValidationError
from .layers import Module, Parameter, SpnLayer, quant_summary, spn_layers

logger = logging.getLogger(__name__)

PHASES = ("full-precision", "quantized", "frozen")


@dataclass
class Phase:
    name: str
    epochs: int = 0
    lr: float = 0.1
    milestones: List[Tuple[int, float]] = field(default_factory=list)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch`` counted from the start of this phase."""
        lr = self.lr
        for start, factor in sorted(self.milestones):
            if epoch >= start:
                lr *= factor
        return lr


@dataclass
class TrainPhasePlan:
    phases: List[Phase]
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    decay_a_tilde: bool = False

    def __post_init__(self):
        names = [p.name for p in self.phases]
        if any(n not in PHASES for n in names):
            raise ValidationError(f"unknown phase in {names}; expected names from {PHASES}")
        if names != sorted(names, key=PHASES.index) or len(set(names)) != len(names):
            raise ValidationError(f"phases must appear in the order {PHASES}, got {names}")
        if self.batch_size < 1 or any(p.epochs < 0 for p in self.phases):
            raise ValidationError("batch size must be positive and epoch counts non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPhasePlan":
        d = dict(d)
        d["phases"] = [
            Phase(p["name"], int(p.get("epochs", 0)), float(p.get("lr", 0.1)),
                  [(int(e), float(f)) for e, f in p.get("milestones", [])])
            for p in d["phases"]
        ]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KdConfig:
    enabled: bool = False
    temperature: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0 or self.weight < 0:
            raise ValidationError("KD temperature must be > 0 and weight >= 0")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float,
             weight_decay: float) -> None:
    """In-place classical momentum step: v <- m v + g + wd p;  p <- p - lr v."""
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


class SGD:
    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            wd = self.weight_decay if p.decay else 0.0
            sgd_step(p.data, grad.astype(p.dtype, copy=False), v, p.dtype.type(lr), p.dtype.type(self.momentum),
                     p.dtype.type(wd))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _as_targets(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return ad.one_hot(labels, classes)
    return labels


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray, hard_targets: np.ndarray,
            cfg: KdConfig = KdConfig(enabled=True)) -> Tensor:
    """Cross entropy on hard targets plus ``weight`` times cross entropy against the teacher's softmax."""
    teacher_logits = np.asarray(teacher_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {teacher_logits.shape} != student logits {student_logits.shape}")
    classes = student_logits.shape[1]
    loss = softmax_cross_entropy(student_logits, _as_targets(hard_targets, classes))
    if cfg.weight == 0:
        return loss
    T = cfg.temperature
    soft = softmax(teacher_logits.astype(np.float64) / T)
    student = student_logits if T == 1 else student_logits * (1.0 / T)
    return loss + softmax_cross_entropy(student, soft) * cfg.weight


def l1_a_tilde(model: Module) -> Optional[Tensor]:
    terms = [ad.tsum(ad.tabs(layer.a_tilde)) for layer in spn_layers(model)]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Data order for ``epoch``: a counter-based generator keyed on (seed, epoch)."""
    key = (int(epoch) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def set_phase(model: Module, phase: str) -> None:
    for layer in spn_layers(model):
        for q in layer.quant_states():
            if phase in ("quantized", "frozen"):
                q.activate()
            if phase == "frozen":
                q.freeze()


def trainable_parameters(model: Module, phase: str, decay_a_tilde: bool) -> List[Parameter]:
    """Parameters updated in ``phase``; frozen-phase shadows are excluded."""
    frozen_shadows = set()
    for layer in spn_layers(model):
        layer.a_tilde.decay = decay_a_tilde
        if phase == "frozen":
            frozen_shadows.update(id(q.shadow) for q in layer.quant_states())
    return [p for p in model.parameters() if id(p) not in frozen_shadows]


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == labels).mean())


def predict(model: Module, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = [model(Tensor(X[i:i + batch_size])).data for i in range(0, len(X), batch_size)]
    model.train(was_training)
    return np.concatenate(outs, axis=0)


def _first_bad_layer(model: Module, xb: np.ndarray) -> str:
    layers = getattr(model, "layers", [model])
    x = Tensor(xb)
    for i, layer in enumerate(layers):
        for name, p in layer.named_parameters():
            if not np.isfinite(p.data).all():
                return f"layer {i} ({type(layer).__name__}) parameter {name}"
        x = layer(x)
        if not np.isfinite(x.data).all():
            return f"layer {i} ({type(layer).__name__}) output"
    return "loss"


def run_training(
    model: Module,
    data: Tuple[np.ndarray, np.ndarray],
    plan: TrainPhasePlan,
    kd: KdConfig = KdConfig(),
    l1: float = 0.0,
    teacher: Optional[Module] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Tuple[Module, List[dict]]:
    """Train ``model`` through the phases of ``plan``; returns the model and per-epoch metric records.

    The last record (``"final": true``) holds the most recent (delta, alpha) of every quantized weight.
    """
    X, y = data
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if kd.enabled and teacher is None:
        raise ValidationError("knowledge distillation needs a teacher model")
    teacher_logits = predict(teacher, X) if kd.enabled else None

    log: List[dict] = []
    global_epoch = 0
    n = len(X)
    for phase in plan.phases:
        if phase.epochs == 0:
            continue
        set_phase(model, phase.name)
        opt = SGD(trainable_parameters(model, phase.name, plan.decay_a_tilde), plan.momentum, plan.weight_decay)
        for e in range(phase.epochs):
            lr = phase.lr_at(e)
            model.train()
            order = epoch_permutation(n, plan.seed, global_epoch)
            total, batches = 0.0, 0
            for start in range(0, n, plan.batch_size):
                idx = order[start:start + plan.batch_size]
                xb = X[idx]
                try:
                    logits = model(Tensor(xb))
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {global_epoch}: {exc}") from exc
                if kd.enabled:
                    loss = kd_loss(logits, teacher_logits[idx], y[idx], kd)
                else:
                    loss = softmax_cross_entropy(logits, ad.one_hot(y[idx], logits.shape[1], logits.dtype))
                if l1:
                    reg = l1_a_tilde(model)
                    if reg is not None:
                        loss = loss + reg * l1
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"epoch {global_epoch}: non-finite loss; first offender: "
                                           f"{_first_bad_layer(model, xb)}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                total += value
                batches += 1
            record = {
                "epoch": global_epoch,
                "phase": phase.name,
                "phase_epoch": e,
                "lr": lr,
                "loss": total / batches,
                "accuracy": accuracy(predict(model, X), y),
            }
            log.append(record)
            logger.info("epoch %d (%s): loss %.5f acc %.4f", global_epoch, phase.name, record["loss"],
                        record["accuracy"])
            if on_epoch is not None:
                on_epoch(record)
            global_epoch += 1
    final = {"final": True, "epochs": global_epoch, "quantization": quant_summary(model)}
    log.append(final)
    if on_epoch is not None:
        on_epoch(final)
    return model, log


def metrics_jsonl(log: List[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log)
