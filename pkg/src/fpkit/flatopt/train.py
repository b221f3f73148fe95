"""Training loop for SGD, SAM, SWA and FMFP (SAM steps + SWA averaging)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DegenerateLabels, DivergedTraining, InvalidInput, InvalidParam
from ..evalcore import ClassifierHead, EvalSet, format_float, softmax
from ..metrics import auroc
from .data import Dataset
from .losses import CrlHistory, LossSpec, loss_and_grad, mixup, one_hot
from .mlp import MlpModel, forward
from .optim import SwaState, sam_step, sgd_step, swa_update

METHODS = ("sgd", "sam", "swa", "fmfp")
DEFAULT_RHO = 0.05
DEFAULT_SWA_START_FRACTION = 0.6
LR_DECAY_POINTS = (0.5, 0.75)
CYCLE_LR_RATIO = 0.1


@dataclass
class TrainConfig:
    method: str = "sgd"
    loss: LossSpec = field(default_factory=LossSpec)
    mixup_alpha: float | None = None
    epochs: int = 200
    batch_size: int = 64
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    sam_rho: float | None = None
    swa_start: int | None = None
    swa_cycle: int = 1
    swa_lr: float | None = None
    seed: int = 0
    hidden: tuple[int, ...] = (32, 32)

    @property
    def uses_sam(self) -> bool:
        return self.method in ("sam", "fmfp")

    @property
    def averages(self) -> bool:
        return self.method in ("swa", "fmfp")

    def resolved(self, check: bool = True) -> "TrainConfig":
        """Copy with defaults filled in; validates unless ``check`` is False."""
        cfg = TrainConfig(**{**self.__dict__})
        if cfg.method not in METHODS:
            raise InvalidParam(f"unknown method {cfg.method!r}")
        if cfg.sam_rho is None:
            cfg.sam_rho = DEFAULT_RHO if cfg.uses_sam else 0.0
        if cfg.swa_start is None:
            cfg.swa_start = int(DEFAULT_SWA_START_FRACTION * cfg.epochs) if cfg.averages else cfg.epochs
        if cfg.swa_lr is None:
            cfg.swa_lr = step_decay_lr(cfg.base_lr, cfg.swa_start, cfg.epochs)
        cfg.hidden = tuple(int(h) for h in cfg.hidden)
        if not check:
            return cfg
        if cfg.epochs < 0 or cfg.batch_size < 1:
            raise InvalidParam("epochs must be >= 0 and batch_size >= 1")
        if cfg.base_lr <= 0 or not 0 <= cfg.momentum < 1 or cfg.weight_decay < 0:
            raise InvalidParam("need base_lr > 0, momentum in [0, 1), weight_decay >= 0")
        if cfg.uses_sam and not cfg.sam_rho > 0:
            raise InvalidParam(f"method {cfg.method} needs sam_rho > 0")
        if not cfg.uses_sam and cfg.sam_rho != 0:
            raise InvalidParam(f"sam_rho is only meaningful for sam/fmfp, not {cfg.method}")
        if cfg.averages and not 0 <= cfg.swa_start < max(cfg.epochs, 1):
            raise InvalidParam("swa_start must satisfy 0 <= swa_start < epochs")
        if cfg.swa_lr <= 0:
            raise InvalidParam("swa_lr must be > 0")
        if cfg.swa_cycle < 1:
            raise InvalidParam("swa_cycle must be >= 1")
        if cfg.mixup_alpha is not None and cfg.mixup_alpha <= 0:
            raise InvalidParam("mixup_alpha must be > 0")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = {"kind": self.loss.kind, "param": self.loss.param}
        d["hidden"] = list(self.hidden)
        return d


def step_decay_lr(base_lr: float, epoch: int, epochs: int) -> float:
    lr = base_lr
    for frac in LR_DECAY_POINTS:
        if epoch >= frac * epochs:
            lr *= 0.1
    return lr


def learning_rate(cfg: TrainConfig, epoch: int, step: int, steps_per_epoch: int) -> float:
    """Step decay (x0.1 at 50% and 75% of training), then cyclical after swa_start.

    Each cycle of ``swa_cycle`` epochs decays linearly from swa_lr to
    swa_lr/10, so checkpoints collected at cycle ends sit at the low point.
    swa_lr defaults to the step-decay rate in effect at swa_start.
    """
    if cfg.averages and epoch >= cfg.swa_start:
        pos = ((epoch - cfg.swa_start) % cfg.swa_cycle + step / steps_per_epoch) / cfg.swa_cycle
        return cfg.swa_lr * (1.0 - (1.0 - CYCLE_LR_RATIO) * pos)
    return step_decay_lr(cfg.base_lr, epoch, cfg.epochs)


@dataclass
class TrainResult:
    config: TrainConfig
    final_model: MlpModel
    swa_model: MlpModel | None
    history: list[dict]
    swa_state: SwaState | None = None

    @property
    def model(self) -> MlpModel:
        """The model a run delivers: the SWA average when there is one."""
        return self.swa_model if self.swa_model is not None else self.final_model

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,test_acc,test_auroc"]
        for h in self.history:
            acc, auc = ("" if h[key] is None else format_float(h[key]) for key in ("test_acc", "test_auroc"))
            lines.append(f"{h['epoch']},{format_float(h['train_loss'])},{acc},{auc}")
        return "\n".join(lines) + "\n"


def model_evalset(model: MlpModel, data: Dataset) -> EvalSet:
    """Logits of ``data`` with penultimate features and the output layer as head."""
    logits, (inputs, _) = forward(model, data.x)
    w, b = model.layers()[-1]
    return EvalSet(logits, data.labels, inputs[-1], ClassifierHead(w.T, b))


def failure_auroc(logits: np.ndarray, labels: np.ndarray) -> float | None:
    p = softmax(logits)
    correct = p.argmax(axis=1) == labels
    try:
        return auroc(p.max(axis=1), correct)
    except DegenerateLabels:
        return None


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          outliers: Dataset | None = None, check: bool = True) -> TrainResult:
    """Train an MLP on ``train_set`` and record per-epoch test metrics.

    ``check=False`` skips config validation, e.g. to run fmfp with rho = 0.
    """
    cfg = config.resolved(check)
    if cfg.loss.kind == "ce_plus_oe" and (outliers is None or len(outliers) == 0):
        raise InvalidParam("ce_plus_oe training needs an outlier dataset")
    rng = np.random.default_rng(cfg.seed)
    sizes = (train_set.x.shape[1], *cfg.hidden, train_set.num_classes)
    model = MlpModel.init(sizes, rng)
    theta = model.params.copy()
    buf = None
    swa = SwaState()
    crl = CrlHistory(len(train_set)) if cfg.loss.kind == "ce_plus_crl" else None
    n = len(train_set)
    steps = max(1, math.ceil(n / cfg.batch_size))
    k = train_set.num_classes
    history = []

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for step in range(steps):
            idx = perm[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            xb, yb = train_set.x[idx], train_set.labels[idx]
            targets = None
            if cfg.mixup_alpha is not None:
                xb, targets, _ = mixup(xb, one_hot(yb, k), cfg.mixup_alpha, rng)
            out_b = None
            if outliers is not None and cfg.loss.kind == "ce_plus_oe":
                out_b = outliers.x[rng.integers(0, len(outliers), size=idx.size)]
            rate = None
            if crl is not None:
                rate = crl.rate(idx)
                z, _ = forward(model, train_set.x[idx], theta)
                crl.update(idx, z.argmax(axis=1) == yb)

            def grad_fn(th, xb=xb, yb=yb, targets=targets, out_b=out_b, rate=rate):
                return loss_and_grad(model, xb, yb, cfg.loss, th, targets=targets,
                                     outliers=out_b, correct_rate=rate)

            lr = learning_rate(cfg, epoch, step, steps)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    if cfg.uses_sam:
                        theta, buf, loss = sam_step(theta, grad_fn, cfg.sam_rho, lr, buf,
                                                    cfg.momentum, cfg.weight_decay)
                    else:
                        loss, g = grad_fn(theta)
                        theta, buf = sgd_step(theta, g, buf, lr, cfg.momentum, cfg.weight_decay)
            except InvalidInput:
                # only the logits can be non-finite here: the data were validated
                raise DivergedTraining(epoch + 1) from None
            if not (math.isfinite(loss) and np.all(np.isfinite(theta))):
                raise DivergedTraining(epoch + 1)
            losses.append(loss)

        if cfg.averages and epoch >= cfg.swa_start and (epoch - cfg.swa_start + 1) % cfg.swa_cycle == 0:
            swa = swa_update(swa, theta, epoch + 1)

        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else math.nan,
                  "test_acc": None, "test_auroc": None}
        if test_set is not None and len(test_set):
            current = swa.mean if swa.count else theta
            logits, _ = forward(model, test_set.x, current)
            record["test_acc"] = float(np.mean(logits.argmax(axis=1) == test_set.labels))
            record["test_auroc"] = failure_auroc(logits, test_set.labels)
        history.append(record)

    final = model.copy(theta)
    swa_model = model.copy(swa.mean) if swa.count else None
    return TrainResult(cfg, final, swa_model, history, swa if cfg.averages else None)
