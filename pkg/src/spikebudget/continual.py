"""Class-incremental training: task splits, the C0-C4 ladder, and metrics.

A run presents disjoint class groups one after another to a single shared
head. After finishing task j the net is evaluated on every task k <= j,
filling row j of a lower-triangular accuracy matrix from which the three
summary metrics derive:

    ACC = mean of the final row
    F   = mean over k < K of (peak accuracy ever seen on task k) - (final)
    BWT = mean over k < K of (final accuracy on k) - (accuracy right after
          training k)

Configs C0..C4 toggle three independent mechanisms: replay, learnable LIF
parameters, and the spike-budget scheduler.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .budget import (
    BudgetConfig,
    BudgetControllerState,
    BudgetLogRecord,
    budget_penalty,
    controller_update,
    spike_rate,
)
from .datasets import DatasetSplits
from .encoding import encode_frames
from .network import (
    AdamState,
    FcSnn,
    apply_update,
    backward,
    forward,
    init_fcsnn,
    predict,
    task_loss,
)
from .replay import ReplayBuffer, compose_batch

# config id -> (replay, learnable_lif, scheduler)
CONFIG_FLAGS = {
    "C0": (False, False, False),
    "C1": (True, False, False),
    "C2": (True, True, False),
    "C3": (True, False, True),
    "C4": (True, True, True),
}


# ---------------------------------------------------------------------------
# Task schedule


def parse_schedule(spec: str | list, num_classes: int = 10) -> list[tuple[int, ...]]:
    """Turn '5x2' (or an explicit list of class groups) into a schedule."""
    if isinstance(spec, str):
        try:
            n_tasks, per_task = (int(v) for v in spec.lower().split("x"))
        except ValueError as exc:
            raise ValueError(f"bad schedule spec {spec!r}, want e.g. '5x2'") from exc
        if n_tasks * per_task > num_classes:
            raise ValueError(f"schedule {spec} needs more than {num_classes} classes")
        schedule = [
            tuple(range(j * per_task, (j + 1) * per_task)) for j in range(n_tasks)
        ]
    else:
        schedule = [tuple(int(c) for c in group) for group in spec]
    validate_schedule(schedule, num_classes)
    return schedule


def validate_schedule(schedule: list[tuple[int, ...]], num_classes: int) -> None:
    seen: set[int] = set()
    if not schedule:
        raise ValueError("schedule is empty")
    for group in schedule:
        if not group:
            raise ValueError("empty task in schedule")
        for c in group:
            if not 0 <= c < num_classes:
                raise ValueError(f"class {c} outside [0, {num_classes})")
            if c in seen:
                raise ValueError(f"class {c} appears in two tasks")
            seen.add(c)


def split_tasks(labels: np.ndarray, schedule: list[tuple[int, ...]]) -> list[np.ndarray]:
    """Index arrays per task, in schedule order."""
    labels = np.asarray(labels)
    return [np.flatnonzero(np.isin(labels, group)) for group in schedule]


# ---------------------------------------------------------------------------
# Accuracy matrix and metrics


class AccuracyMatrix:
    """Lower-triangular A[j][k]: accuracy on task k after training task j."""

    def __init__(self, rows: list[list[float]]):
        for j, row in enumerate(rows):
            if len(row) != j + 1:
                raise ValueError(f"row {j} must have {j + 1} entries, got {len(row)}")
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"accuracy {v} outside [0, 1]")
        self.rows = [[float(v) for v in row] for row in rows]

    @property
    def K(self) -> int:
        return len(self.rows)

    def __getitem__(self, jk: tuple[int, int]) -> float:
        j, k = jk
        return self.rows[j][k]

    def final_row(self) -> list[float]:
        return self.rows[-1]


def _rows(A) -> list[list[float]]:
    return A.rows if isinstance(A, AccuracyMatrix) else A


def acc_metric(A) -> float:
    """Mean of the final row: average accuracy over all tasks at the end."""
    rows = _rows(A)
    final = rows[-1]
    total = 0.0
    for v in final:
        total += v
    return total / len(final)


def forgetting_metric(A) -> float | None:
    """Mean drop from each earlier task's peak accuracy; None when K = 1."""
    rows = _rows(A)
    K = len(rows)
    if K < 2:
        return None
    total = 0.0
    for k in range(K - 1):
        peak = rows[k][k]
        for j in range(k + 1, K):
            if rows[j][k] > peak:
                peak = rows[j][k]
        total += peak - rows[K - 1][k]
    return total / (K - 1)


def bwt_metric(A) -> float | None:
    """Mean signed accuracy change since each task was first trained."""
    rows = _rows(A)
    K = len(rows)
    if K < 2:
        return None
    total = 0.0
    for k in range(K - 1):
        total += rows[K - 1][k] - rows[k][k]
    return total / (K - 1)


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class RunConfig:
    config_id: str = "C4"
    replay: bool = True
    learnable_lif: bool = True
    scheduler: bool = True
    schedule: list = field(default_factory=lambda: parse_schedule("5x2"))
    epochs_per_task: int = 3
    batch_size: int = 64
    timesteps: int = 25
    lr: float = 1e-3
    hidden: int = 128
    seed: int = 42
    buffer_capacity: int = 500
    reencode: bool = True
    insert_final_epoch_only: bool = True
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.config_id in CONFIG_FLAGS:
            expected = CONFIG_FLAGS[self.config_id]
            actual = (self.replay, self.learnable_lif, self.scheduler)
            if actual != expected:
                raise ValueError(
                    f"{self.config_id} requires flags {expected}, got {actual}"
                )

    @classmethod
    def named(cls, config_id: str, **overrides) -> "RunConfig":
        if config_id not in CONFIG_FLAGS:
            raise ValueError(f"unknown config {config_id!r}")
        rep, learn, sched = CONFIG_FLAGS[config_id]
        return cls(config_id=config_id, replay=rep, learnable_lif=learn,
                   scheduler=sched, **overrides)

    def echo(self) -> dict:
        """JSON-ready snapshot of every knob that shaped the run."""
        return {
            "config_id": self.config_id,
            "replay": self.replay,
            "learnable_lif": self.learnable_lif,
            "scheduler": self.scheduler,
            "schedule": [list(g) for g in self.schedule],
            "epochs_per_task": self.epochs_per_task,
            "batch_size": self.batch_size,
            "timesteps": self.timesteps,
            "lr": self.lr,
            "hidden": self.hidden,
            "seed": self.seed,
            "buffer_capacity": self.buffer_capacity,
            "reencode": self.reencode,
            "insert_final_epoch_only": self.insert_final_epoch_only,
            "budget": {
                "r_target": self.budget.r_target,
                "eta": self.budget.eta,
                "lambda_min": self.budget.lambda_min,
                "lambda_max": self.budget.lambda_max,
                "window": self.budget.window,
            },
            "grad_clip": self.grad_clip,
        }


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    dataset: str
    matrix: AccuracyMatrix
    acc: float
    forgetting: float | None
    bwt: float | None
    mean_spike_rate: float
    budget_log: list[BudgetLogRecord]
    wall_time_s: float
    net: FcSnn
    controller: BudgetControllerState
    buffer: ReplayBuffer | None


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(net: FcSnn, spikes: np.ndarray, labels: np.ndarray,
             active: np.ndarray, eval_batch: int = 256) -> float:
    """Accuracy of masked-argmax predictions on a pre-encoded pool."""
    labels = np.asarray(labels)
    n = spikes.shape[1]
    if n == 0:
        raise ValueError("empty evaluation pool")
    correct = 0
    for start in range(0, n, eval_batch):
        chunk = spikes[:, start:start + eval_batch, :]
        rec = forward(net, chunk)
        preds = predict(rec.logits, active)
        correct += int((preds == labels[start:start + eval_batch]).sum())
    return correct / n


# ---------------------------------------------------------------------------
# The training loop


def run_config(cfg: RunConfig, data: DatasetSplits) -> RunResult:
    """Train one configuration through the full task sequence."""
    t_start = time.perf_counter()
    validate_schedule(cfg.schedule, data.num_classes)

    # independent child streams in fixed order; consuming one never shifts
    # the others, which is what makes runs reproducible
    children = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_init, rng_shuffle, rng_enc_train, rng_enc_test, rng_replay = (
        np.random.default_rng(s) for s in children
    )

    in_dim = data.train_x.shape[1]
    net = init_fcsnn(in_dim, cfg.hidden, data.num_classes, rng=rng_init,
                     learnable_lif=cfg.learnable_lif)
    opt = AdamState.init(net.parameters(), lr=cfg.lr)
    buffer = ReplayBuffer(cfg.buffer_capacity, data.num_classes) if cfg.replay else None
    bstate = BudgetControllerState.init(cfg.budget)
    log: list[BudgetLogRecord] = []

    # test pools are encoded once so evaluation noise stays fixed across
    # task boundaries
    task_train_idx = split_tasks(data.train_y, cfg.schedule)
    test_pools = []
    for group in cfg.schedule:
        idx = np.flatnonzero(np.isin(data.test_y, group))
        pool = encode_frames(data.test_x[idx], cfg.timesteps, rng_enc_test)
        test_pools.append((pool, data.test_y[idx]))

    rows: list[list[float]] = []
    seen_classes: list[int] = []
    step = 0
    for j, group in enumerate(cfg.schedule):
        seen_classes.extend(group)
        active = np.array(sorted(seen_classes))
        tx = data.train_x[task_train_idx[j]]
        ty = data.train_y[task_train_idx[j]]
        n_task = len(tx)
        if n_task == 0:
            raise ValueError(f"task {j} has no training samples")

        for epoch in range(cfg.epochs_per_task):
            inserting = buffer is not None and (
                not cfg.insert_final_epoch_only
                or epoch == cfg.epochs_per_task - 1
            )
            order = rng_shuffle.permutation(n_task)
            for start in range(0, n_task, cfg.batch_size):
                bidx = order[start:start + cfg.batch_size]
                bx, by = tx[bidx], ty[bidx]

                if buffer is not None and j > 0 and cfg.reencode:
                    mix_x, mix_y = compose_batch(bx, by, buffer, rng_replay)
                    spikes = encode_frames(mix_x, cfg.timesteps, rng_enc_train)
                elif buffer is not None and j > 0 and len(buffer) > 0:
                    # replay stores encoded tensors; concatenate post-encoding
                    spikes_cur = encode_frames(bx, cfg.timesteps, rng_enc_train)
                    n_rep = min(len(bx), len(buffer))
                    rep_s, rep_y = buffer.sample(n_rep, rng_replay)
                    spikes = np.concatenate(
                        [spikes_cur, rep_s.transpose(1, 0, 2)], axis=1
                    )
                    mix_y = np.concatenate([by, rep_y])
                else:
                    spikes = encode_frames(bx, cfg.timesteps, rng_enc_train)
                    mix_y = by

                rec = forward(net, spikes)
                r_batch = spike_rate(rec.spikes)
                penalty, dpen_dr = budget_penalty(
                    r_batch, cfg.budget.r_target, bstate.lambda_rate
                )
                loss = task_loss(rec.logits, mix_y, active) + penalty
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at step {step + 1} "
                        f"(task {j}, epoch {epoch}, config {cfg.config_id})"
                    )
                grads = backward(net, rec, mix_y, active,
                                 budget_grad_coeff=dpen_dr)
                apply_update(net, grads, opt, max_norm=cfg.grad_clip)
                step += 1

                if cfg.scheduler:
                    controller_update(bstate, cfg.budget, r_batch)
                else:
                    # keep the windowed rate observable even when lambda
                    # stays frozen at its initial value
                    bstate.rate_window.append(float(r_batch))
                log.append(BudgetLogRecord(
                    step=step,
                    r_batch=r_batch,
                    r_windowed=bstate.windowed_rate(),
                    lambda_rate=bstate.lambda_rate,
                    penalty=penalty,
                    loss=float(loss),
                ))

                if inserting:
                    if cfg.reencode:
                        for img, lab in zip(bx, by):
                            buffer.insert(img, lab, rng_replay)
                    else:
                        for i, lab in enumerate(by):
                            buffer.insert(spikes[:, i, :], lab, rng_replay)

        rows.append([
            evaluate(net, test_pools[k][0], test_pools[k][1], active)
            for k in range(j + 1)
        ])

    matrix = AccuracyMatrix(rows)
    rates = np.array([rec.r_batch for rec in log], dtype=np.float64)
    return RunResult(
        config=cfg,
        seed=cfg.seed,
        dataset=data.name,
        matrix=matrix,
        acc=acc_metric(matrix),
        forgetting=forgetting_metric(matrix),
        bwt=bwt_metric(matrix),
        mean_spike_rate=float(rates.mean()),
        budget_log=log,
        wall_time_s=time.perf_counter() - t_start,
        net=net,
        controller=bstate,
        buffer=buffer,
    )
