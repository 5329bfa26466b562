"""Minibatch SGD with per-layer weight decay, a stepped learning-rate
schedule, a geometric ramp on the verification weight alpha, deterministic
subject-grouped batching, checkpointing, and training-curve logging.

Determinism contract: every stochastic choice (batch composition, pair
sampling, dropout masks) is a pure function of (schedule.seed, epoch, step),
so a resumed run replays exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import faceproc
from . import layers as L
from . import network as N
from .errors import DataError, NumericalError
from .objective import CombinedLoss, ObjectiveConfig, PairBatch, combined_loss, \
    sample_pairs


@dataclass(frozen=True)
class TrainingSchedule:
    lr_initial: float = 1e-2
    lr_final: float = 1e-5
    alpha_initial: float = 3.2e-4
    alpha_final: float = 6.4e-3
    milestones: tuple[int, ...] | None = None
    decay_conv: float = 0.0
    decay_fc: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    subjects_per_batch: int | None = None
    epochs: int = 30
    seed: int = 0
    margin: float = 1.0
    positives_per_batch: int | None = None
    negatives_per_batch: int | None = None
    dtype: str = "float64"
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must be <= lr_initial")
        if self.alpha_initial > self.alpha_final:
            raise ValueError("alpha_initial must be <= alpha_final")
        if self.decay_conv < 0 or self.decay_fc < 0:
            raise ValueError("weight decays must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if self.milestones is not None:
            ms = tuple(self.milestones)
            if list(ms) != sorted(set(ms)) or (ms and ms[0] < 1):
                raise ValueError("milestones must be strictly increasing, >= 1")
            object.__setattr__(self, "milestones", ms)

    def resolved_milestones(self) -> tuple[int, ...]:
        """Three x0.1 steps placed at 1/2, 3/4 and 7/8 of the run unless the
        schedule pins them explicitly."""
        if self.milestones is not None:
            return self.milestones
        auto = {self.epochs // 2, self.epochs * 3 // 4, self.epochs * 7 // 8}
        return tuple(sorted(m for m in auto if 1 <= m < self.epochs))

    def pair_counts(self) -> tuple[int, int]:
        pos = self.positives_per_batch
        neg = self.negatives_per_batch
        return (self.batch_size // 4 if pos is None else pos,
                self.batch_size // 4 if neg is None else neg)

    def grouped_subjects(self) -> int:
        spb = self.subjects_per_batch
        return max(1, self.batch_size // 4) if spb is None else spb


def lr_at(schedule: TrainingSchedule, epoch: int) -> float:
    """Steps down x0.1 at each milestone, clamped at lr_final."""
    passed = sum(1 for m in schedule.resolved_milestones() if epoch >= m)
    stepped = schedule.lr_initial * 0.1 ** passed
    # land exactly on the floor once the steps reach it (up to rounding)
    if stepped <= schedule.lr_final * (1.0 + 1e-9):
        return schedule.lr_final
    return stepped


def alpha_at(schedule: TrainingSchedule, epoch: int) -> float:
    """Geometric ramp from alpha_initial to alpha_final across milestones."""
    ms = schedule.resolved_milestones()
    if not ms:
        return schedule.alpha_initial
    passed = sum(1 for m in ms if epoch >= m)
    if passed == 0:
        return schedule.alpha_initial
    if passed == len(ms) or schedule.alpha_initial == 0.0:
        return schedule.alpha_final if passed == len(ms) else 0.0
    ratio = schedule.alpha_final / schedule.alpha_initial
    return schedule.alpha_initial * ratio ** (passed / len(ms))


def decay_for(kind: L.LayerKind, schedule: TrainingSchedule) -> float:
    """Effective weight decay per layer kind."""
    if isinstance(kind, L.Convolution):
        return schedule.decay_conv
    if isinstance(kind, L.FullyConnected):
        return schedule.decay_fc
    return 0.0


def momentum_update(weights: np.ndarray, grad: np.ndarray,
                    velocity: np.ndarray, lr: float, decay: float,
                    momentum: float) -> None:
    """In-place SGD step: v <- momentum*v + (grad + decay*w); w <- w - lr*v.

    With momentum 0 and zero gradient this is exactly w *= (1 - lr*decay).
    """
    velocity *= momentum
    velocity += grad
    if decay != 0.0:
        velocity += decay * weights
    weights -= lr * velocity


# --------------------------------------------------------------------------
# Schedule config file (plain-text key=value)

def schedule_to_text(s: TrainingSchedule) -> str:
    lines = []
    for f in fields(TrainingSchedule):
        v = getattr(s, f.name)
        if v is None:
            continue
        if f.name == "milestones":
            v = ",".join(str(m) for m in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def schedule_from_text(text: str) -> TrainingSchedule:
    known = {f.name: f for f in fields(TrainingSchedule)}
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"(\w+)\s*=\s*(.*)", line)
        if not m or m.group(1) not in known:
            raise DataError(f"schedule line {lineno}: cannot parse {line!r}")
        name, value = m.group(1), m.group(2).strip()
        if name == "milestones":
            kwargs[name] = tuple(int(v) for v in value.split(",") if v.strip())
        elif name == "dtype":
            kwargs[name] = value
        elif name in ("batch_size", "subjects_per_batch", "epochs", "seed",
                      "positives_per_batch", "negatives_per_batch",
                      "checkpoint_every"):
            kwargs[name] = int(value)
        else:
            kwargs[name] = float(value)
    try:
        return TrainingSchedule(**kwargs)
    except ValueError as exc:
        raise DataError(f"bad schedule: {exc}") from exc


# --------------------------------------------------------------------------
# Batching

def make_batches(manifest: faceproc.Manifest, batch_size: int,
                 subjects_per_batch: int, seed):
    """Yield index batches grouping a few subjects each, so genuine pairs
    exist inside every batch. Deterministic per seed."""
    if not manifest.records:
        raise DataError("empty manifest")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(manifest.records):
        groups.setdefault(rec.subject_id, []).append(i)
    subject_ids = sorted(groups)
    spb = min(subjects_per_batch, len(subject_ids))
    order = rng.permutation(len(subject_ids))
    cursor = 0
    n_batches = max(1, len(manifest.records) // batch_size)
    for _ in range(n_batches):
        if cursor + spb > len(order):
            order = rng.permutation(len(subject_ids))
            cursor = 0
        chosen = [subject_ids[k] for k in order[cursor : cursor + spb]]
        cursor += spb
        pool = np.concatenate([groups[s] for s in chosen])
        if pool.size >= batch_size:
            batch = rng.choice(pool, size=batch_size, replace=False)
        else:
            extra = rng.choice(pool, size=batch_size - pool.size, replace=True)
            batch = rng.permutation(np.concatenate([pool, extra]))
        yield [int(i) for i in batch]


# --------------------------------------------------------------------------
# Logging

@dataclass
class LogRecord:
    epoch: int
    step: int
    softmax: float
    contrastive: float
    total: float
    lr: float
    alpha: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.step}\t{self.softmax!r}\t"
                f"{self.contrastive!r}\t{self.total!r}\t{self.lr!r}\t"
                f"{self.alpha!r}")


@dataclass
class TrainingLog:
    records: list[LogRecord] = field(default_factory=list)

    def mean_softmax(self, epoch: int) -> float:
        vals = [r.softmax for r in self.records if r.epoch == epoch]
        return float(np.mean(vals))


def read_log(path) -> TrainingLog:
    log = TrainingLog()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        e, s, sm, co, to, lr, al = line.split("\t")
        log.records.append(LogRecord(int(e), int(s), float(sm), float(co),
                                     float(to), float(lr), float(al)))
    return log


# --------------------------------------------------------------------------
# The step and the loop

def _first_nonfinite(net: N.Network, traces) -> str | None:
    names = [n for n, _ in net.spec.layers]
    for trace in traces:
        for name, out in zip(names, trace.outputs):
            if not np.all(np.isfinite(out)):
                return name
    return None


def apply_sgd_update(net: N.Network, schedule: TrainingSchedule,
                     epoch: int) -> None:
    """Apply one momentum-SGD update from the currently accumulated grads."""
    lr = lr_at(schedule, epoch)
    for name, kind in net.spec.layers:
        if L.weight_shape(kind) is None:
            continue
        st = net.states[name]
        if st.grad is None:
            st.grad = np.zeros_like(st.weights)
        if st.velocity is None:
            st.velocity = np.zeros_like(st.weights)
        momentum_update(st.weights, st.grad, st.velocity, lr,
                        decay_for(kind, schedule), schedule.momentum)


def sgd_step(net: N.Network, batch: PairBatch, schedule: TrainingSchedule,
             epoch: int, step: int = 0) -> LogRecord:
    """Forward the batch, combine the two costs, backprop, update weights."""
    alpha = alpha_at(schedule, epoch)
    config = ObjectiveConfig(alpha, schedule.margin)
    net.zero_grad()
    traces = []
    for i, img in enumerate(batch.images):
        traces.append(net.forward_full(
            img, dropout_seed=[schedule.seed, epoch, step, i]))
    result: CombinedLoss = combined_loss(
        [t.logits for t in traces], batch.labels,
        [t.embedding for t in traces], batch.pairs, config)
    if not math.isfinite(result.total):
        layer = _first_nonfinite(net, traces)
        where = f"layer {layer!r}" if layer else "the loss itself"
        raise NumericalError(f"non-finite loss at epoch {epoch} step {step};"
                             f" first non-finite value in {where}")
    for i, trace in enumerate(traces):
        net.backward(trace, result.grad_logits[i], result.grad_embeddings[i])
    apply_sgd_update(net, schedule, epoch)
    return LogRecord(epoch, step, result.softmax_mean, result.contrastive_mean,
                     result.total, lr_at(schedule, epoch), alpha)


def fit_input(img: np.ndarray, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Adapt an aligned grayscale crop to the spec input, block-averaging down
    by an integer factor when the sizes disagree."""
    th, tw, _ = input_shape
    h, w = img.shape
    if (h, w) != (th, tw):
        if h % th or w % tw or h // th != w // tw:
            raise DataError(f"image {h}x{w} does not reduce to input"
                            f" {th}x{tw} by an integer factor")
        img = faceproc.downscale(img, h // th)
    return img[:, :, None]


def manifest_loader(root, input_shape: tuple[int, int, int]):
    """Record -> input tensor: read the crop, mirror if flagged, fit size."""
    root = Path(root)

    def load(rec: faceproc.FaceRecord) -> np.ndarray:
        img = faceproc.read_pgm(root / rec.path)
        if rec.mirrored:
            img = faceproc.mirror(img)
        return fit_input(img, input_shape)

    return load


def _checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / f"checkpoint-{epoch:05d}.fpck"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("checkpoint-*.fpck"))
    return found[-1] if found else None


def train(manifest: faceproc.Manifest, spec: N.NetworkSpec,
          schedule: TrainingSchedule, output_dir, *, loader=None,
          image_root=None, resume: bool = False,
          net: N.Network | None = None) -> tuple[N.Network, TrainingLog]:
    """Run the training loop, writing per-epoch checkpoints and an
    append-only log; resumable from the latest checkpoint deterministically.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"

    if loader is None:
        loader = manifest_loader(image_root or ".", spec.input_shape)

    subjects = sorted({rec.subject_id for rec in manifest.records})
    if len(subjects) != spec.class_count:
        raise DataError(f"manifest has {len(subjects)} subjects but the spec"
                        f" classifies {spec.class_count}")
    label_of = {s: i for i, s in enumerate(subjects)}

    start_epoch = 0
    if resume:
        ckpt = latest_checkpoint(out)
        if ckpt is None:
            raise DataError(f"resume requested but no checkpoint in {out}")
        net = N.load_checkpoint(ckpt)
        if net.spec != spec:
            raise DataError("checkpoint spec disagrees with requested spec")
        start_epoch = net.epoch
        if log_path.exists():
            kept = [r for r in read_log(log_path).records if r.epoch < start_epoch]
            log_path.write_text("".join(r.line() + "\n" for r in kept))
    elif net is None:
        net = N.init_weights(spec, schedule.seed, np.dtype(schedule.dtype))
        N.save_checkpoint(net, _checkpoint_path(out, 0))
        log_path.write_text("")

    images = [loader(rec) for rec in manifest.records]
    labels_all = [label_of[rec.subject_id] for rec in manifest.records]
    pos_n, neg_n = schedule.pair_counts()

    log = TrainingLog(read_log(log_path).records if log_path.exists() else [])
    net.mode = "train"
    with open(log_path, "a") as log_fh:
        for epoch in range(start_epoch, schedule.epochs):
            batches = make_batches(manifest, schedule.batch_size,
                                   schedule.grouped_subjects(),
                                   seed=[schedule.seed, 104729, epoch])
            for step, idx in enumerate(batches):
                pairs = sample_pairs([labels_all[i] for i in idx],
                                     [schedule.seed, 7919, epoch, step],
                                     pos_n, neg_n)
                batch = PairBatch([images[i] for i in idx],
                                  [labels_all[i] for i in idx], pairs)
                rec = sgd_step(net, batch, schedule, epoch, step)
                log.records.append(rec)
                log_fh.write(rec.line() + "\n")
            log_fh.flush()
            net.epoch = epoch + 1
            if (epoch + 1) % schedule.checkpoint_every == 0 \
                    or epoch + 1 == schedule.epochs:
                N.save_checkpoint(net, _checkpoint_path(out, epoch + 1))
    return net, log
