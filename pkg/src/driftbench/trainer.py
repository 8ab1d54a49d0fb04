"""Training loops: three-stage DARE / DARE++ and the rehearsal baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .buffer import (BufferEntry, IrsConfig, ReplayBatch, ReplayBuffer, irs_insert, reservoir_insert,
                     sample_batch)
from .losses import LossWeights, SimilarityParams, Stage
from .metrics import (AccuracyMatrix, CalibrationReport, DriftSeries, backward_transfer, ece,
                      last_accuracy, logit_norm_stats, representation_drift)
from .model import DualHeadModel, EmaModel, EncoderConfig, init_model
from .streams import DomainTask, joint_view
from .tensor import SgdOptimizer, softmax_values

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class Method(str, Enum):
    DARE = "dare"
    DARE_PLUS = "dare++"
    ER = "er"
    DERPP = "derpp"
    SGD_SEQ = "sgd"
    JOINT = "joint"

    @property
    def uses_buffer(self) -> bool:
        return self in (Method.DARE, Method.DARE_PLUS, Method.ER, Method.DERPP)


DEFAULT_LR = {Method.DARE: 0.04, Method.DARE_PLUS: 0.04, Method.DERPP: 0.01,
              Method.ER: 0.1, Method.SGD_SEQ: 0.04, Method.JOINT: 0.04}
DEFAULT_WEIGHTS = {Method.DERPP: LossWeights(alpha=0.1, beta=0.1)}
DEFAULT_STRATEGY = {Method.DARE: "irs", Method.DARE_PLUS: "irs"}


@dataclass
class TrainConfig:
    epochs_per_task: int = 50
    batch_size: int = 32
    learning_rate: float | None = None
    momentum: float = 0.0
    weights: LossWeights | None = None
    similarity: SimilarityParams = field(default_factory=SimilarityParams)
    buffer_size: int = 50
    buffer_strategy: str | None = None
    irs_sigma: float | None = None
    ema_update_prob: float = 0.05
    ema_decay: float = 0.999
    eval_every: int = 50
    seed: int = 0
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    ablate: tuple[str, ...] = ()
    symmetric_discrepancy: bool = True
    ece_bins: int = 10

    def resolved(self, method: Method) -> "TrainConfig":
        """Copy with method-dependent defaults filled in."""
        method = Method(method)
        return replace(
            self,
            learning_rate=self.learning_rate if self.learning_rate is not None else DEFAULT_LR[method],
            weights=self.weights if self.weights is not None else DEFAULT_WEIGHTS.get(method, LossWeights()),
            buffer_strategy=self.buffer_strategy or DEFAULT_STRATEGY.get(method, "reservoir"),
            irs_sigma=self.irs_sigma if self.irs_sigma is not None else self.epochs_per_task / 6.0,
        )

    @property
    def irs(self) -> IrsConfig:
        sigma = self.irs_sigma if self.irs_sigma is not None else self.epochs_per_task / 6.0
        return IrsConfig(sigma=sigma, epochs_per_task=self.epochs_per_task)


def validate_config(method: Method, cfg: TrainConfig) -> None:
    method = Method(method)
    if cfg.epochs_per_task < 1 or cfg.batch_size < 1 or cfg.eval_every < 1:
        raise TrainConfigError("epochs_per_task, batch_size and eval_every must be >= 1")
    if method in (Method.DARE, Method.DARE_PLUS) and cfg.epochs_per_task < 3:
        raise TrainConfigError(f"{method.value} needs epochs_per_task >= 3 so every stage runs, got {cfg.epochs_per_task}")
    if method.uses_buffer and cfg.buffer_size <= 0:
        raise TrainConfigError(f"{method.value} needs a buffer capacity > 0, got {cfg.buffer_size}")
    if cfg.buffer_strategy not in (None, "reservoir", "irs"):
        raise TrainConfigError(f"buffer_strategy must be 'reservoir' or 'irs', got {cfg.buffer_strategy!r}")
    if cfg.learning_rate is not None and cfg.learning_rate <= 0:
        raise TrainConfigError("learning_rate must be positive")
    bad = set(cfg.ablate) - {"L1", "L2", "L3", "L4"}
    if bad:
        raise TrainConfigError(f"unknown ablation terms {sorted(bad)}")


def stage_for_epoch(task_index: int, epoch: int) -> Stage:
    if task_index == 1:
        return Stage.FIRST_TASK
    return (Stage.DIVERGENCE, Stage.ADAPTATION, Stage.REFINEMENT)[epoch % 3]


_FROZEN = {
    Stage.FIRST_TASK: {"encoder": False, "head1": False, "head2": False},
    Stage.DIVERGENCE: {"encoder": True, "head1": False, "head2": False},
    Stage.ADAPTATION: {"encoder": False, "head1": True, "head2": True},
    Stage.REFINEMENT: {"encoder": False, "head1": False, "head2": False},
}


@dataclass
class RunRngs:
    """Independent generators per purpose so one consumer never shifts another."""
    shuffle: np.random.Generator
    buffer: np.random.Generator
    ema: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunRngs":
        gens = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
        return cls(*gens)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatch indices; a trailing singleton joins the previous batch."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


class Trainer:
    """Holds one run's mutable state: model, optional EMA, buffer, generators, counters.

    ``on_step`` is called after every optimizer step with the trainer; it is
    where periodic probes hook in. ``on_epoch`` receives
    (phase, task_id, epoch, stage, trainer) with phase "start" or "end".
    """

    def __init__(self, model: DualHeadModel, buffer: ReplayBuffer | None, cfg: TrainConfig,
                 rngs: RunRngs, ema: EmaModel | None = None,
                 on_step: Callable | None = None, on_epoch: Callable | None = None):
        self.model = model
        self.buffer = buffer
        self.cfg = cfg
        self.rngs = rngs
        self.ema = ema
        self.opt = SgdOptimizer(cfg.learning_rate, cfg.momentum)
        self.iteration = 0
        self.current_task = 0
        self.offers: dict[int, int] = {}
        self.on_step = on_step
        self.on_epoch = on_epoch

    # plumbing

    def _step(self, loss: T.Tensor) -> None:
        self.model.zero_grad()
        T.backward(loss)
        self.opt.step(self.model.trainable_parameters())
        if self.ema is not None:
            self.ema.maybe_update(self.model, self.rngs.ema)
        self.iteration += 1
        if self.on_step is not None:
            self.on_step(self)

    def _replay(self) -> ReplayBatch | None:
        if self.buffer is None or self.buffer.is_empty():
            return None
        return self.buffer.as_batch(sample_batch(self.buffer, self.cfg.batch_size, self.rngs.buffer))

    def _epoch_event(self, phase: str, task_id: int, epoch: int, stage) -> None:
        if self.on_epoch is not None:
            self.on_epoch(phase, task_id, epoch, stage, self)

    def _set_stage(self, stage: Stage) -> None:
        for part, frozen in _FROZEN[stage].items():
            self.model.set_frozen(part, frozen)

    # per-method task loops

    def train_task_dare(self, task: DomainTask) -> None:
        cfg = self.cfg
        t = task.task_id
        self.current_task = t
        if t > 1:
            if cfg.epochs_per_task < 3:
                raise TrainConfigError("DARE needs epochs_per_task >= 3")
            if self.buffer is None or self.buffer.is_empty():
                raise L.ReplayUnavailableError(f"task {t} starts with an empty buffer")
        for epoch in range(cfg.epochs_per_task):
            stage = stage_for_epoch(t, epoch)
            self._set_stage(stage)
            self._epoch_event("start", t, epoch, stage)
            for idx in batches(len(task.y_train), cfg.batch_size, self.rngs.shuffle):
                x, y = task.x_train[idx], task.y_train[idx]
                replay = None if stage is Stage.FIRST_TASK else self._replay()
                loss = L.stage_loss(stage, (x, y), replay, self.model, cfg.weights, cfg.similarity,
                                    ablate=cfg.ablate, symmetric=cfg.symmetric_discrepancy)
                # stored logits come from the model before this batch's update
                offer_logits = self._logits(x)
                self._step(loss)
                self._offer_with(task, idx, epoch, cfg.buffer_strategy, offer_logits)
            self._epoch_event("end", t, epoch, stage)
        self.model.unfreeze_all()

    def _logits(self, x):
        with T.no_grad():
            _, z1, z2 = self.model.forward(x)
        return z1.values, z2.values

    def _offer_with(self, task: DomainTask, idx, epoch: int, strategy: str, logits) -> None:
        self.offers[task.task_id] = self.offers.get(task.task_id, 0) + len(idx)
        if self.buffer is None:
            return
        z1, z2 = logits
        irs = self.cfg.irs if strategy == "irs" else None
        for row, i in enumerate(idx):
            entry = BufferEntry(input=task.x_train[i].copy(), label=int(task.y_train[i]), zeta1=z1[row].copy(),
                                zeta2=z2[row].copy(), task_id=task.task_id, epoch_of_origin=epoch)
            if irs is None:
                reservoir_insert(self.buffer, entry, self.rngs.buffer)
            else:
                irs_insert(self.buffer, entry, epoch, irs, self.rngs.buffer)

    def _train_single_head(self, task: DomainTask, replay_loss: Callable | None) -> None:
        cfg = self.cfg
        self.current_task = task.task_id
        self.model.unfreeze_all()
        for epoch in range(cfg.epochs_per_task):
            self._epoch_event("start", task.task_id, epoch, None)
            for idx in batches(len(task.y_train), cfg.batch_size, self.rngs.shuffle):
                x, y = task.x_train[idx], task.y_train[idx]
                logits = self._logits(x) if self.buffer is not None else None
                _, out1, _ = self.model.forward(x)
                loss = L.cross_entropy(out1, y)
                if replay_loss is not None:
                    replay = self._replay()
                    if replay is not None:
                        loss = T.add(loss, replay_loss(replay))
                self._step(loss)
                if self.buffer is not None:
                    self._offer_with(task, idx, epoch, cfg.buffer_strategy or "reservoir", logits)
                else:
                    self.offers[task.task_id] = self.offers.get(task.task_id, 0) + len(idx)
            self._epoch_event("end", task.task_id, epoch, None)

    def train_task_er(self, task: DomainTask) -> None:
        def replay_loss(batch):
            _, out1, _ = self.model.forward(batch.x)
            return L.cross_entropy(out1, batch.y)

        self._train_single_head(task, replay_loss)

    def train_task_derpp(self, task: DomainTask) -> None:
        w = self.cfg.weights

        def replay_loss(batch):
            _, out1, _ = self.model.forward(batch.x)
            return T.add(T.mul(L.mse(out1, batch.zeta1), w.alpha),
                         T.mul(L.cross_entropy(out1, batch.y), w.beta))

        self._train_single_head(task, replay_loss)

    def train_sgd_seq(self, task: DomainTask) -> None:
        self._train_single_head(task, None)


def train_task_dare(m, ema, task, buf, cfg, rngs) -> None:
    Trainer(m, buf, cfg, rngs, ema=ema).train_task_dare(task)


def train_task_er(m, task, buf, cfg, rngs) -> None:
    Trainer(m, buf, cfg, rngs).train_task_er(task)


def train_task_derpp(m, task, buf, cfg, rngs) -> None:
    Trainer(m, buf, cfg, rngs).train_task_derpp(task)


def train_sgd_seq(m, task, cfg, rngs) -> None:
    Trainer(m, None, cfg, rngs).train_sgd_seq(task)


def train_joint(m, tasks, cfg, rngs) -> None:
    Trainer(m, None, cfg, rngs).train_sgd_seq(joint_view(tasks, cfg.seed))


@dataclass
class MetricsReport:
    method: str
    accuracy: AccuracyMatrix
    last_accuracy: float
    bwt: float | None
    task1_accuracy: list[tuple[int, float]]
    drift: DriftSeries
    calibration: dict[str, CalibrationReport]
    logit_norms: list[tuple[float, float]]
    offers_per_task: dict[int, int]
    config: TrainConfig
    model: DualHeadModel | None = None
    eval_model: DualHeadModel | None = None
    buffer: ReplayBuffer | None = None


def accuracy(model: DualHeadModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(model.predict(x) == y)) if len(y) else float("nan")


class _Probe:
    """Periodic task-1 accuracy and buffered-sample drift recorder."""

    def __init__(self, eval_model: Callable[[], DualHeadModel], tasks: list[DomainTask], every: int):
        self.eval_model = eval_model
        self.task1 = tasks[0]
        self.fallback = tasks[0].x_train[:50]
        self.every = every
        self.previous = eval_model().snapshot()
        self.last_task = 0
        self.task1_acc: list[tuple[int, float]] = []
        self.drift = DriftSeries()

    def __call__(self, trainer: Trainer) -> None:
        if trainer.iteration % self.every:
            return
        current = self.eval_model()
        buf = trainer.buffer
        probe = buf.inputs() if buf is not None and not buf.is_empty() else self.fallback
        value = representation_drift(current, self.previous, probe)
        boundary = trainer.current_task != self.last_task
        self.last_task = trainer.current_task
        self.drift.append(trainer.iteration, trainer.current_task, value, boundary)
        self.task1_acc.append((trainer.iteration, accuracy(current, self.task1.x_test, self.task1.y_test)))
        self.previous = current.snapshot()


def run_experiment(method, tasks: list[DomainTask], cfg: TrainConfig,
                   on_epoch: Callable | None = None) -> MetricsReport:
    """Train ``method`` over ``tasks`` and evaluate every task after each one."""
    method = Method(method)
    validate_config(method, cfg)
    cfg = cfg.resolved(method)
    n_tasks = len(tasks)
    if n_tasks < 1:
        raise TrainConfigError("empty task stream")
    mcfg = EncoderConfig(input_dim=tasks[0].input_dim, num_classes=tasks[0].num_classes,
                         hidden_dims=list(cfg.hidden_dims))
    model = init_model(mcfg, int(np.random.SeedSequence([cfg.seed, 7]).generate_state(1)[0]))
    rngs = RunRngs.from_seed(cfg.seed)
    buffer = ReplayBuffer(cfg.buffer_size) if method.uses_buffer else None
    ema = EmaModel(model, cfg.ema_decay, cfg.ema_update_prob) if method is Method.DARE_PLUS else None

    def eval_model() -> DualHeadModel:
        return ema.shadow if ema is not None else model

    probe = _Probe(eval_model, tasks, cfg.eval_every)
    trainer = Trainer(model, buffer, cfg, rngs, ema=ema, on_step=probe, on_epoch=on_epoch)
    acc = AccuracyMatrix(n_tasks)

    def evaluate() -> list[float]:
        m = eval_model()
        return [accuracy(m, t.x_test, t.y_test) for t in tasks]

    if method is Method.JOINT:
        joint = joint_view(tasks, cfg.seed)
        trainer.train_sgd_seq(joint)
        final = evaluate()
        for j in range(1, n_tasks + 1):
            acc.record(j, final)
    else:
        train = {
            Method.DARE: trainer.train_task_dare,
            Method.DARE_PLUS: trainer.train_task_dare,
            Method.ER: trainer.train_task_er,
            Method.DERPP: trainer.train_task_derpp,
            Method.SGD_SEQ: trainer.train_sgd_seq,
        }[method]
        for task in tasks:
            train(task)
            acc.record(task.task_id, evaluate())
            log.info("%s task %d done: acc on seen tasks %s", method.value, task.task_id,
                     np.round(acc.values[: task.task_id, task.task_id - 1], 4).tolist())

    final_model = eval_model()
    logits = [final_model.logits1(t.x_test) for t in tasks]
    calibration = {}
    groups = {"first": [0], "last": [n_tasks - 1], "all": list(range(n_tasks))}
    for name, ids in groups.items():
        conf = np.concatenate([softmax_values(logits[i]).max(axis=1) for i in ids])
        hit = np.concatenate([np.argmax(logits[i], axis=1) == tasks[i].y_test for i in ids])
        calibration[name] = ece(conf, hit, cfg.ece_bins)

    return MetricsReport(
        method=method.value,
        accuracy=acc,
        last_accuracy=last_accuracy(acc),
        bwt=backward_transfer(acc) if n_tasks >= 2 else None,
        task1_accuracy=probe.task1_acc,
        drift=probe.drift,
        calibration=calibration,
        logit_norms=logit_norm_stats(logits),
        offers_per_task=dict(trainer.offers),
        config=cfg,
        model=model,
        eval_model=final_model,
        buffer=buffer,
    )
