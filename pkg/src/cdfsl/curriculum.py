"""Stage 2: supervised source loss plus teacher-student consistency on target.

Per epoch the consistency weight follows an arctan ramp in the epoch ratio
``x = epoch / epochs`` and the classifier head's learning rate follows the
mirrored ramp. The teacher is an exponential moving average of the student
and only ever produces detached, temperature-sharpened pseudo-labels.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .data import AugmentConfig, Datasets, LabeledBatch, sample_batches, strong_augment, weak_augment
from .errors import ConsistencyError, NumericError, TrainingError, ValidationError
from .model import ModelConfig, classify, encode, forward_logits, init_head, standardize, tokenize
from .params import ModelParams, OptimizerConfig, l2_distance, sgd_step
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class CurriculumConfig:
    epochs: int = 200
    batch_size: int = 16
    student_lr: float = 0.01
    teacher_momentum: float = 0.9
    temperature: float = 0.1
    schedule_slope: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    # None follows the arctan schedule; a number pins lambda_cons for every epoch
    lambda_override: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("curriculum needs at least one epoch")
        if not 0.0 <= self.teacher_momentum < 1.0:
            raise ValidationError("teacher_momentum must lie in [0, 1)")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.student_lr, self.weight_decay, self.momentum)


# ---------------------------------------------------------------------------
# schedules


def _check_ratio(x: float) -> None:
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise ValidationError(f"epoch ratio must lie in [0, 1], got {x}")


def lambda_cons(x: float, slope: float = 10.0) -> float:
    _check_ratio(x)
    return math.atan(slope * (x - 0.5)) / math.pi + 0.5


def lambda_cls(x: float, slope: float = 10.0) -> float:
    _check_ratio(x)
    return math.atan(-slope * (x - 0.5)) / math.pi + 0.5


@dataclass(frozen=True)
class ScheduleState:
    x: float
    lambda_cons: float
    lambda_cls: float

    @classmethod
    def at(cls, epoch: int, epochs: int, slope: float = 10.0, override: float | None = None) -> "ScheduleState":
        x = epoch / epochs
        lc = lambda_cons(x, slope) if override is None else float(override)
        return cls(x, lc, lambda_cls(x, slope))


# ---------------------------------------------------------------------------
# losses


def sharpen(teacher_logits: Tensor | np.ndarray, tau: float) -> Tensor:
    """Detached ``softmax(logits / tau)``."""
    if not tau > 0:
        raise ValidationError("temperature must be positive")
    z = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    with no_grad():
        return T.softmax(Tensor(z / tau)).detach()


def supervised_loss(student: ModelParams, model_cfg: ModelConfig, batch: LabeledBatch) -> Tensor:
    logits = forward_logits(batch.clips, model_cfg, student)
    n_classes = logits.shape[-1]
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= n_classes):
        raise ConsistencyError(f"labels outside the head's {n_classes} classes")
    return T.cross_entropy(logits, T.one_hot(batch.labels, n_classes))


def teacher_pseudo_labels(teacher: ModelParams, model_cfg: ModelConfig, weak_clips: np.ndarray, tau: float) -> Tensor:
    with no_grad():
        return sharpen(forward_logits(weak_clips, model_cfg, teacher), tau)


def consistency_loss(
    student: ModelParams,
    teacher: ModelParams,
    model_cfg: ModelConfig,
    clips: np.ndarray,
    tau: float,
    rng: np.random.Generator,
    augment: AugmentConfig = AugmentConfig(),
) -> Tensor:
    """Cross-entropy of student(strong view) against sharpened teacher(weak view)."""
    weak = weak_augment(clips, rng, augment)
    strong = strong_augment(clips, rng, augment)
    targets = teacher_pseudo_labels(teacher, model_cfg, weak, tau)
    return T.cross_entropy(forward_logits(strong, model_cfg, student), targets)


def total_loss(l_sup: Tensor, l_con: Tensor, lam: float) -> Tensor:
    if not (np.isfinite(l_sup.data).all() and np.isfinite(l_con.data).all() and math.isfinite(lam)):
        raise TrainingError("non-finite loss term")
    return l_sup + lam * l_con


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherState:
    params: ModelParams
    update_count: int = 0

    @classmethod
    def copy_of(cls, student: ModelParams) -> "TeacherState":
        return cls(student.copy(requires_grad=False))


def ema_update(teacher: TeacherState, student: ModelParams, alpha: float) -> TeacherState:
    """``theta_t <- alpha * theta_t + (1 - alpha) * theta_s``, in place."""
    if teacher.params.keys() != student.keys():
        raise ConsistencyError("teacher and student parameter names differ")
    if not 0.0 <= alpha < 1.0:
        raise ValidationError("alpha must lie in [0, 1)")
    for name, t in teacher.params.items():
        t.data = alpha * t.data + (1.0 - alpha) * student[name].data
    teacher.update_count += 1
    return teacher


# ---------------------------------------------------------------------------
# training loop


@dataclass
class CurriculumState:
    student: ModelParams
    teacher: TeacherState
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def encoder(self) -> ModelParams:
        """Student with the source head discarded."""
        return self.student.without(["head", "decoder"])


def init_curriculum_state(encoder_init: ModelParams, n_classes: int, model_cfg: ModelConfig, cfg: CurriculumConfig) -> CurriculumState:
    student = encoder_init.without(["head", "decoder"]).copy()
    head = init_head(model_cfg.encoder.embed_dim, n_classes, rngmod.stream(cfg.seed, "init", "head"))
    student.update(head)
    return CurriculumState(student, TeacherState.copy_of(student))


def _joint_losses(student, model_cfg, src_clips, src_labels, str_clips, targets):
    """One student forward over source and strong-view target clips together."""
    both = np.concatenate([src_clips, str_clips], axis=0)
    tokens = tokenize(standardize(both, model_cfg.clip), model_cfg.clip, student)
    _, pooled = encode(tokens, student, model_cfg.encoder)
    logits = classify(pooled, student)
    n_src = len(src_clips)
    src_logits = T.narrow(logits, 0, 0, n_src)
    tgt_logits = T.narrow(logits, 0, n_src, len(both))
    l_sup = T.cross_entropy(src_logits, T.one_hot(src_labels, logits.shape[-1]))
    l_con = T.cross_entropy(tgt_logits, targets)
    return l_sup, l_con


def run_curriculum(
    encoder_init: ModelParams,
    data: Datasets,
    model_cfg: ModelConfig,
    cfg: CurriculumConfig,
    state: CurriculumState | None = None,
    augment: AugmentConfig = AugmentConfig(),
    on_epoch: Callable[[CurriculumState, dict], None] | None = None,
) -> CurriculumState:
    """Train the student; the returned state's ``encoder`` is the hand-off.

    When the consistency weight is exactly zero the target branch is skipped
    entirely, which makes a zero-weight run identical to plain supervised
    training on the same batches.
    """
    n_classes = data.source.n_classes
    state = state or init_curriculum_state(encoder_init, n_classes, model_cfg, cfg)
    student, teacher = state.student, state.teacher
    if student["head.weight"].shape[1] != n_classes:
        raise ConsistencyError("student head width does not match the source class count")
    opt = cfg.optimizer

    for epoch in range(state.epoch, cfg.epochs):
        sched = ScheduleState.at(epoch, cfg.epochs, cfg.schedule_slope, cfg.lambda_override)
        scales = {"head": sched.lambda_cls}
        sums = {"loss_sup": 0.0, "loss_con": 0.0, "loss_total": 0.0}
        n_steps = 0
        batches = sample_batches(data, cfg.batch_size, cfg.batch_size, rngmod.stream(cfg.seed, "curriculum", "batches", epoch))
        try:
            for step, (lab, unl) in enumerate(batches):
                src_rng = rngmod.stream(cfg.seed, "curriculum", "source-aug", epoch, step)
                src_clips = weak_augment(lab.clips, src_rng, augment)
                student.zero_grad()
                if sched.lambda_cons == 0.0:
                    l_sup = supervised_loss(student, model_cfg, LabeledBatch(src_clips, lab.labels, lab.clip_ids))
                    l_con_value = 0.0
                    loss = l_sup
                else:
                    tgt_rng = rngmod.stream(cfg.seed, "curriculum", "target-aug", epoch, step)
                    weak = weak_augment(unl.clips, tgt_rng, augment)
                    strong = strong_augment(unl.clips, tgt_rng, augment)
                    targets = teacher_pseudo_labels(teacher.params, model_cfg, weak, cfg.temperature)
                    l_sup, l_con = _joint_losses(student, model_cfg, src_clips, lab.labels, strong, targets)
                    loss = total_loss(l_sup, l_con, sched.lambda_cons)
                    l_con_value = l_con.item()
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(
                        f"total loss is not finite (sup={l_sup.item()}, con={l_con_value}, lambda={sched.lambda_cons})",
                        epoch,
                    )
                loss.backward()
                sgd_step(student, student.grads(), opt, scales, state.momentum)
                ema_update(teacher, student, cfg.teacher_momentum)
                sums["loss_sup"] += l_sup.item()
                sums["loss_con"] += l_con_value
                sums["loss_total"] += value
                n_steps += 1
        except NumericError as exc:
            raise TrainingError(f"values overflowed during training: {exc}", epoch) from exc
        if not student.all_finite():
            raise TrainingError("student parameters became non-finite", epoch)
        record = {
            "epoch": epoch,
            "x": sched.x,
            "lambda_cons": sched.lambda_cons,
            "lambda_cls": sched.lambda_cls,
            **{k: v / n_steps for k, v in sums.items()},
            "teacher_student_l2": l2_distance(student, teacher.params),
        }
        state.log.append(record)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(state, record)
    student.zero_grad()
    return state
