"""Synchronized data-parallel training and evaluation loop.

Every step: per-replica forward/backward (group BN, optional bf16 convs),
all-reduce mean of gradients, then one optimizer step applied identically on
every replica. Replica parameter copies are audited for bitwise equality.
Evaluation shards a zero-weight-padded eval set across all replicas and
all-reduces weighted correctness counts, so the result is independent of the
replica count.

Records carry modeled timing from the cost model; elapsed_s is cumulative
*modeled* seconds so that metric streams are bitwise reproducible (wall clock
is not, and desk-scale wall clock says nothing about pod-scale behavior).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import distbn, perfmodel
from .collectives import (
    GroupAssignment,
    ReplicaTopology,
    all_reduce,
    assign_groups_1d,
    assign_groups_2d,
)
from .data import Dataset, gen_synthetic, load_idx
from .model import (
    LayerSpec,
    build_model,
    distributed_forward_backward,
    eval_forward,
    init_bn_moving,
    init_params,
)
from .nn import Parameter
from .optim import (
    ExponentialDecay,
    LarsConfig,
    OptimizerState,
    PolynomialDecay,
    RmsPropConfig,
    ScheduleSpec,
    lars_step,
    lr_at,
    rmsprop_step,
)
from .precision import FP32_ONLY, MIXED_BF16_CONV, PrecisionPolicy
from .rng import stream

SYNTHETIC_DEFAULTS = dict(num_classes=10, n=8192, height=16, width=16, channels=1)
SYNTHETIC_EVAL_N = 2048
AUDIT_EVERY = 25


class ReplicaDivergenceError(RuntimeError):
    """Replicas no longer hold bitwise-identical parameters or state."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


@dataclass
class TrainConfig:
    """Everything one experiment needs; field names double as config keys."""

    model: str = "toy_cnn"
    dataset: str = "synthetic"
    num_replicas: int = 1
    global_batch: int = 64
    bn_group_size: int = 1
    bn_grouping: str = "1d"
    grid_rows: int | None = None
    grid_cols: int | None = None
    tile_rows: int | None = None
    tile_cols: int | None = None
    bn_momentum: float = distbn.DEFAULT_MOMENTUM
    bn_eps: float = distbn.DEFAULT_EPS
    optimizer: str = "rmsprop"
    lr_per_256: float = 0.016
    warmup_epochs: float = 0.0
    decay: str = "exponential"
    decay_rate: float = 0.97
    epochs_per_decay: float = 2.4
    poly_power: float = 2.0
    end_lr: float = 0.0
    momentum: float = 0.9
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-3
    lars_eta: float = 0.001
    lars_weight_decay: float = 1e-5
    precision: str = "fp32"
    total_epochs: float = 350.0
    eval_every_epochs: float = 1.0
    eval_batch: int | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_replicas < 1:
            raise ValueError("num_replicas must be >= 1")
        if self.global_batch < 1 or self.global_batch % self.num_replicas != 0:
            raise ValueError(
                f"global_batch {self.global_batch} must be a positive multiple "
                f"of num_replicas {self.num_replicas}"
            )
        if self.bn_grouping not in ("1d", "2d"):
            raise ValueError(f"bn_grouping must be 1d or 2d, got {self.bn_grouping!r}")
        if self.bn_grouping == "1d":
            if self.bn_group_size < 1 or self.num_replicas % self.bn_group_size != 0:
                raise ValueError(
                    f"bn_group_size {self.bn_group_size} must divide "
                    f"num_replicas {self.num_replicas}"
                )
        else:
            if self.tile_rows is None or self.tile_cols is None:
                raise ValueError("2d grouping requires tile_rows and tile_cols")
            tile_area = self.tile_rows * self.tile_cols
            if self.bn_group_size not in (1, tile_area):
                raise ValueError(
                    f"bn_group_size {self.bn_group_size} contradicts the "
                    f"{self.tile_rows}x{self.tile_cols} tile ({tile_area} replicas)"
                )
        if self.optimizer not in ("rmsprop", "lars"):
            raise ValueError(f"optimizer must be rmsprop or lars, got {self.optimizer!r}")
        if self.decay not in ("exponential", "polynomial"):
            raise ValueError(
                f"decay must be exponential or polynomial, got {self.decay!r}"
            )
        if self.precision not in ("fp32", "mixed_bf16"):
            raise ValueError(
                f"precision must be fp32 or mixed_bf16, got {self.precision!r}"
            )
        if self.eval_every_epochs <= 0:
            raise ValueError("eval_every_epochs must be > 0")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def per_core_batch(self) -> int:
        return self.global_batch // self.num_replicas

    @property
    def policy(self) -> PrecisionPolicy:
        return MIXED_BF16_CONV if self.precision == "mixed_bf16" else FP32_ONLY

    def group_assignment(self) -> GroupAssignment:
        if self.bn_grouping == "2d":
            grid = None
            if self.grid_rows is not None or self.grid_cols is not None:
                if self.grid_rows is None or self.grid_cols is None:
                    raise ValueError("grid_rows and grid_cols must be given together")
                grid = (self.grid_rows, self.grid_cols)
            topo = ReplicaTopology(self.num_replicas, grid)
            return assign_groups_2d(topo, (self.tile_rows, self.tile_cols))
        return assign_groups_1d(self.num_replicas, self.bn_group_size)

    def optimizer_config(self):
        if self.optimizer == "rmsprop":
            return RmsPropConfig(
                decay=self.rmsprop_decay, momentum=self.momentum, eps=self.rmsprop_eps
            )
        return LarsConfig(
            eta=self.lars_eta,
            momentum=self.momentum,
            weight_decay=self.lars_weight_decay,
        )

    def schedule(self, steps_per_epoch: int) -> ScheduleSpec:
        if self.decay == "exponential":
            d = ExponentialDecay(self.decay_rate, self.epochs_per_decay)
        else:
            d = PolynomialDecay(self.poly_power, self.end_lr)
        return ScheduleSpec(
            lr_per_256=self.lr_per_256,
            global_batch=self.global_batch,
            # warmup cannot outlast the run (degenerate for total_epochs=0)
            warmup_epochs=min(self.warmup_epochs, self.total_epochs),
            steps_per_epoch=steps_per_epoch,
            total_epochs=self.total_epochs,
            decay=d,
        )


@dataclass
class MetricsRecord:
    step: int
    epoch: float
    lr: float
    train_loss: float
    eval_top1: float | None
    modeled_step_ms: float
    allreduce_frac: float
    elapsed_s: float


METRICS_HEADER = "step,epoch,lr,train_loss,eval_top1,modeled_step_ms,allreduce_frac,elapsed_s"


def format_metrics_csv(records: list[MetricsRecord]) -> str:
    lines = [METRICS_HEADER]
    for r in records:
        eval_field = "" if r.eval_top1 is None else repr(float(r.eval_top1))
        lines.append(
            f"{r.step},{float(r.epoch)!r},{float(r.lr)!r},{float(r.train_loss)!r},"
            f"{eval_field},{float(r.modeled_step_ms)!r},"
            f"{float(r.allreduce_frac)!r},{float(r.elapsed_s)!r}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_metrics_csv(records))


# ---------------------------------------------------------------------------
# sharding


def shard_train_data(
    dataset: Dataset, num_replicas: int, per_core_batch: int, seed: int, epoch: int = 0
):
    """Deterministic per-epoch shard: shuffle, chunk into global batches,
    split each chunk contiguously across replicas.

    The step-t global batch is perm[t*B:(t+1)*B] regardless of how B factors
    into replicas, which is what makes runs with different replica counts
    comparable. Trailing examples that do not fill a global batch are dropped.
    """
    n = len(dataset)
    batch = num_replicas * per_core_batch
    steps = n // batch
    if steps < 1:
        raise ValueError(
            f"dataset of {n} examples is smaller than one global batch ({batch})"
        )
    perm = stream(seed, "shuffle", epoch).permutation(n)
    out = []
    for t in range(steps):
        chunk = perm[t * batch : (t + 1) * batch]
        per_replica = []
        for r in range(num_replicas):
            idx = chunk[r * per_core_batch : (r + 1) * per_core_batch]
            per_replica.append((dataset.images[idx], dataset.labels[idx]))
        out.append(per_replica)
    return out


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    layers: list[LayerSpec]
    params_per_replica: list[list[Parameter]]
    bn_moving_per_replica: list[dict]
    opt_state_per_replica: list[OptimizerState]
    assignment: GroupAssignment
    config: TrainConfig
    step_count: int = 0

    @property
    def num_replicas(self) -> int:
        return len(self.params_per_replica)

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.params_per_replica[0]))


def init_train_state(
    config: TrainConfig, input_shape: tuple[int, ...], num_classes: int
) -> TrainState:
    layers = build_model(config.model, num_classes)
    base = init_params(layers, input_shape, config.seed)
    n = config.num_replicas
    params = [[p.copy() for p in base] for _ in range(n)]
    moving = [init_bn_moving(layers, input_shape) for _ in range(n)]
    opt = [OptimizerState.for_params(config.optimizer, base) for _ in range(n)]
    return TrainState(layers, params, moving, opt, config.group_assignment(), config)


def audit_replicas(state: TrainState) -> None:
    """Bitwise comparison of parameters and optimizer slots across replicas."""
    ref_params = state.params_per_replica[0]
    ref_slots = state.opt_state_per_replica[0].slots
    for r in range(1, state.num_replicas):
        for p0, pr in zip(ref_params, state.params_per_replica[r]):
            if p0.value.tobytes() != pr.value.tobytes():
                raise ReplicaDivergenceError(
                    f"parameter {p0.name} diverged on replica {r} "
                    f"at step {state.step_count}"
                )
        for name, slots in ref_slots.items():
            for sname, arr in slots.items():
                other = state.opt_state_per_replica[r].slots[name][sname]
                if arr.tobytes() != other.tobytes():
                    raise ReplicaDivergenceError(
                        f"optimizer slot {name}/{sname} diverged on replica {r} "
                        f"at step {state.step_count}"
                    )


def train_step(state: TrainState, batches, lr: float) -> float:
    """One synchronized step over per-replica (images, labels) batches."""
    cfg = state.config
    xs = [b[0] for b in batches]
    ys = [b[1] for b in batches]
    res = distributed_forward_backward(
        state.layers,
        state.params_per_replica,
        state.bn_moving_per_replica[0],
        xs,
        ys,
        state.assignment,
        policy=cfg.policy,
        bn_eps=cfg.bn_eps,
        workers=cfg.workers,
    )

    num_params = len(state.params_per_replica[0])
    reduced_by_param = [
        all_reduce([res.grads_per_replica[r][i] for r in range(state.num_replicas)],
                   "mean")
        for i in range(num_params)
    ]
    opt_cfg = cfg.optimizer_config()
    step_fn = rmsprop_step if cfg.optimizer == "rmsprop" else lars_step
    for r in range(state.num_replicas):
        grads_r = [reduced_by_param[i][r] for i in range(num_params)]
        step_fn(state.params_per_replica[r], grads_r, lr, opt_cfg,
                state.opt_state_per_replica[r])

    _update_bn_moving(state, res.bn_saved)

    state.step_count += 1
    if state.step_count % AUDIT_EVERY == 0:
        audit_replicas(state)
    return res.mean_loss


def _update_bn_moving(state: TrainState, bn_saved) -> None:
    # Group statistics are averaged across groups (ascending group id) so all
    # replicas carry identical inference statistics.
    cfg = state.config
    for lname, saved_groups in bn_saved.items():
        mean = saved_groups[0][0].copy()
        var = saved_groups[0][1].copy()
        for m, v in saved_groups[1:]:
            mean += m
            var += v
        k = mean.dtype.type(len(saved_groups))
        mean /= k
        var /= k
        for r in range(state.num_replicas):
            pmap = {p.name: p for p in state.params_per_replica[r]}
            mm, mv = state.bn_moving_per_replica[r][lname]
            st = distbn.BnState(
                pmap[f"{lname}/gamma"].value, pmap[f"{lname}/beta"].value,
                mm, mv, momentum=cfg.bn_momentum, eps=cfg.bn_eps)
            new = distbn.update_moving_stats(st, mean, var)
            state.bn_moving_per_replica[r][lname] = (new.moving_mean, new.moving_var)


# ---------------------------------------------------------------------------
# distributed evaluation


def distributed_eval(
    layers: list[LayerSpec],
    params: list[Parameter],
    bn_moving: dict,
    dataset: Dataset,
    num_replicas: int,
    eval_batch: int,
    policy: PrecisionPolicy = FP32_ONLY,
    bn_eps: float = distbn.DEFAULT_EPS,
) -> float:
    """Top-1 accuracy over the dataset, sharded across all replicas.

    The eval set is padded with zero-weight dummy examples to a multiple of
    num_replicas * eval_batch; weighted correct/total counts are all-reduce
    summed, so the accuracy counts exactly the real examples and does not
    depend on the replica count.
    """
    n = len(dataset)
    per_round = num_replicas * eval_batch
    padded_n = per_round * math.ceil(n / per_round)
    pad = padded_n - n
    images = dataset.images
    labels = dataset.labels
    weights = np.ones(padded_n, dtype=np.float32)
    if pad:
        images = np.concatenate(
            [images, np.zeros((pad,) + images.shape[1:], dtype=images.dtype)])
        labels = np.concatenate([labels, np.zeros(pad, dtype=labels.dtype)])
        weights[n:] = 0.0

    counts = [np.zeros(2, dtype=np.float32) for _ in range(num_replicas)]
    for s in range(padded_n // eval_batch):
        r = s % num_replicas
        sl = slice(s * eval_batch, (s + 1) * eval_batch)
        logits = eval_forward(layers, params, bn_moving, images[sl], policy, bn_eps)
        pred = logits.argmax(axis=1)
        hit = (pred == labels[sl]).astype(np.float32) * weights[sl]
        counts[r] += np.array([hit.sum(), weights[sl].sum()], dtype=np.float32)
    total = all_reduce(counts, "sum")[0]
    return float(total[0] / total[1])


# ---------------------------------------------------------------------------
# run loop


def build_datasets(config: TrainConfig) -> tuple[Dataset, Dataset]:
    spec = config.dataset
    if spec == "synthetic":
        train = gen_synthetic(seed=config.seed, noise_stream=0, **SYNTHETIC_DEFAULTS)
        eval_kw = dict(SYNTHETIC_DEFAULTS)
        eval_kw["n"] = SYNTHETIC_EVAL_N
        evalset = gen_synthetic(seed=config.seed, noise_stream=1, **eval_kw)
        return train, evalset
    if spec.startswith("idx:"):
        paths = spec[len("idx:"):].split(",")
        if len(paths) not in (2, 4):
            raise ValueError(
                "idx dataset must be idx:train_images,train_labels"
                "[,eval_images,eval_labels]"
            )
        train = load_idx(paths[0], paths[1])
        evalset = load_idx(paths[2], paths[3]) if len(paths) == 4 else train
        return train, evalset
    raise ValueError(f"unknown dataset spec {spec!r}")


def run(config: TrainConfig) -> list[MetricsRecord]:
    """Train per the config, interleaving distributed evaluation.

    Fully deterministic for a fixed (config, seed), including the modeled
    timing fields. A non-finite loss aborts with the records collected so far
    attached to the raised error.
    """
    records, _ = run_with_state(config)
    return records


def run_with_state(config: TrainConfig) -> tuple[list[MetricsRecord], TrainState]:
    """run(), but also hands back the final TrainState (for weights dumps)."""
    train_ds, eval_ds = build_datasets(config)
    input_shape = train_ds.images.shape[1:]
    state = init_train_state(config, input_shape, train_ds.num_classes)
    steps_per_epoch = len(train_ds) // config.global_batch
    if steps_per_epoch < 1:
        raise ValueError(
            f"dataset of {len(train_ds)} examples is smaller than one "
            f"global batch ({config.global_batch})"
        )
    schedule = config.schedule(steps_per_epoch)
    cost = dataclasses.replace(
        perfmodel.DEFAULT_COST_PARAMS, param_bytes=4 * state.param_count())
    step_ms = perfmodel.step_time(config.per_core_batch, config.num_replicas, cost)
    ar_frac = perfmodel.allreduce_fraction(
        config.per_core_batch, config.num_replicas, cost)
    eval_batch = config.eval_batch or config.per_core_batch

    def evaluate() -> float:
        return distributed_eval(
            state.layers, state.params_per_replica[0],
            state.bn_moving_per_replica[0], eval_ds, config.num_replicas,
            eval_batch, config.policy, config.bn_eps)

    records: list[MetricsRecord] = []
    total_steps = int(round(config.total_epochs * steps_per_epoch))
    if total_steps == 0:
        records.append(MetricsRecord(
            step=0, epoch=0.0, lr=lr_at(schedule, 0), train_loss=float("nan"),
            eval_top1=evaluate(), modeled_step_ms=step_ms,
            allreduce_frac=ar_frac, elapsed_s=0.0))
        return records, state

    gstep = 0
    elapsed_ms = 0.0
    next_eval = config.eval_every_epochs
    epoch = 0
    while gstep < total_steps:
        for batches in shard_train_data(
            train_ds, config.num_replicas, config.per_core_batch,
            config.seed, epoch,
        ):
            if gstep >= total_steps:
                break
            lr = lr_at(schedule, gstep)
            loss = train_step(state, batches, lr)
            gstep += 1
            elapsed_ms += step_ms
            records.append(MetricsRecord(
                step=gstep - 1, epoch=gstep / steps_per_epoch, lr=lr,
                train_loss=loss, eval_top1=None, modeled_step_ms=step_ms,
                allreduce_frac=ar_frac, elapsed_s=elapsed_ms / 1000.0))
            if not math.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss} at step {gstep - 1}", records)
        epoch += 1
        done = gstep >= total_steps
        if epoch + 1e-9 >= next_eval or done:
            records[-1].eval_top1 = evaluate()
            while next_eval <= epoch + 1e-9:
                next_eval += config.eval_every_epochs
    audit_replicas(state)
    return records, state


def save_weights(state: TrainState, path) -> None:
    """Final-weights dump: parameters plus BN moving statistics (npz)."""
    arrays = {}
    for p in state.params_per_replica[0]:
        arrays[f"param/{p.tag}/{p.name}"] = p.value
    for lname, (mm, mv) in state.bn_moving_per_replica[0].items():
        arrays[f"bn_mean/{lname}"] = mm
        arrays[f"bn_var/{lname}"] = mv
    np.savez(path, **arrays)


def load_weights(path) -> tuple[list[Parameter], dict]:
    """Inverse of save_weights; parameter order follows the archive."""
    with np.load(path) as z:
        params: list[Parameter] = []
        moving: dict[str, list] = {}
        for key in z.files:
            head, rest = key.split("/", 1)
            if head == "param":
                tag, name = rest.split("/", 1)
                params.append(Parameter(name, z[key], tag=tag))
            elif head == "bn_mean":
                moving.setdefault(rest, [None, None])[0] = z[key]
            elif head == "bn_var":
                moving.setdefault(rest, [None, None])[1] = z[key]
    return params, {k: (v[0], v[1]) for k, v in moving.items()}


def time_to_peak(records: list[MetricsRecord]) -> tuple[float, float]:
    """Best eval accuracy and the modeled minutes at its first attainment."""
    evals = [(r.eval_top1, r.elapsed_s) for r in records if r.eval_top1 is not None]
    if not evals:
        raise ValueError("no evaluation records")
    peak = max(t for t, _ in evals)
    first = next(s for t, s in evals if t == peak)
    return peak, first / 60.0
