"""Training and evaluation engine.

Enforces the freeze contract: Adam holds state only for trainable parameters,
so frozen encoder weights are bit-identical at every checkpoint. Learning rate
follows plain cosine decay (no warmup, no restarts). A NaN loss aborts the run
with the last-good parameters checkpointed. The gradient audit compares
analytic gradients with central finite differences for every trainable
parameter, with batch norm held in eval mode so running-stat updates cannot
contaminate the differences.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import high_freq_sample, resize_sample
from .errors import ConfigError, NumericError
from .losses import bbce_loss, bce_iou_loss, loss_for_task
from .metrics import evaluate_pairs
from .store import save_checkpoint

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr0: float = 0.0008
    epochs: int = 80
    batch_size: int = 8
    task: str = "cod"
    seed: int = 0
    grad_check: bool = False
    checkpoint_every: int = 0   # epochs; 0 disables periodic checkpoints

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (train-mode batch norm)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.task not in ("cod", "sod", "shadow"):
            raise ConfigError(f"task must be cod, sod or shadow, got {self.task!r}")

    def to_dict(self):
        return {
            "lr0": self.lr0, "epochs": self.epochs, "batch_size": self.batch_size,
            "task": self.task, "seed": self.seed, "grad_check": self.grad_check,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
        cfg.validate()
        return cfg


def cosine_lr(step, total_steps, lr0):
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps)); no warmup, no restarts."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


class Adam:
    """Adam over the trainable parameters only; no weight decay."""

    def __init__(self, store, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.store = store
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(e.array) for n, e in store.param_items("trainable")}
        self.v = {n: np.zeros_like(e.array) for n, e in store.param_items("trainable")}
        if not self.m:
            raise ConfigError("no trainable parameters; nothing to optimize")

    def step(self, grads, lr):
        b1, b2 = self.betas
        self.t += 1
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, m in self.m.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(m)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            arr = self.store[name].array
            arr -= (lr * update).astype(arr.dtype)


class TrainLog:
    """Deterministic per-step/per-epoch records; wall time lives in the manifest."""

    def __init__(self):
        self.records = []
        self.wall_time = 0.0

    def add(self, **record):
        self.records.append(record)

    def lr_at(self, step):
        for r in self.records:
            if r.get("kind") in ("step", "schedule_end") and r["step"] == step:
                return r["lr"]
        raise KeyError(f"no logged record for step {step}")

    def write_ndjson(self, path):
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def _batches(n, batch_size, perm):
    """Contiguous chunks of a permutation; a trailing singleton merges backward."""
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _prepare(samples, model_cfg, task):
    out = []
    for s in samples:
        s = resize_sample(s, model_cfg.image_size)
        if task == "shadow":
            s = high_freq_sample(s)
        out.append(s)
    return out


def train(model, samples, cfg: TrainConfig, out_dir=None):
    """Optimize the trainable parameters; returns (store, TrainLog, checkpoint paths).

    The store is mutated in place. With `out_dir`, periodic/final/last-good
    checkpoints are written there.
    """
    cfg.validate()
    if not samples:
        raise ConfigError("dataset is empty")
    if len(samples) == 1:
        raise ConfigError("need at least 2 samples (train-mode batch norm)")
    data = _prepare(samples, model.config, cfg.task)
    loss_fn = loss_for_task(cfg.task)
    opt = Adam(model.store)
    log = TrainLog()
    ckpts = []
    started = time.monotonic()

    if cfg.grad_check:
        audit = _pre_train_audit(model, cfg, data[0])
        log.add(kind="grad_check", passed=True, groups=len(audit.groups))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def checkpoint(tag):
        if not out_dir:
            return None
        path = os.path.join(out_dir, f"{tag}.ckpt")
        meta = dict(model.store.meta or {})
        meta["train"] = cfg.to_dict()
        save_checkpoint(model.store, path, meta=meta)
        ckpts.append(path)
        return path

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = len(_batches(len(data), cfg.batch_size, np.arange(len(data))))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        epoch_losses = []
        for batch_idx in _batches(len(data), cfg.batch_size, perm):
            images = np.stack([data[i].image for i in batch_idx])
            targets = np.stack([data[i].mask for i in batch_idx])
            lr = cosine_lr(step, total_steps, cfg.lr0)
            logits, pv = model.run(images, mode="train")
            value = loss_fn(logits, targets)
            numbers = value.numbers()
            if not all(np.isfinite(v) for v in numbers.values()):
                checkpoint("last_good")
                raise NumericError(
                    f"non-finite loss at step {step}: {numbers} (last-good checkpoint retained)"
                )
            ad.backward(value.total)
            opt.step(pv.grads(), lr)
            log.add(kind="step", step=step, lr=lr, **numbers)
            epoch_losses.append(numbers["total"])
            step += 1
        log.add(kind="epoch", epoch=epoch, mean_loss=float(np.mean(epoch_losses)))
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(f"epoch{epoch:04d}")
    log.add(kind="schedule_end", step=total_steps if cfg.epochs else 0,
            lr=cosine_lr(total_steps, total_steps, cfg.lr0) if cfg.epochs else cfg.lr0)
    checkpoint("final")
    log.wall_time = time.monotonic() - started
    return model.store, log, ckpts


def _pre_train_audit(model, cfg, sample):
    """Gradient audit gate before training: a float64 twin of the model config."""
    import dataclasses

    from .model import build

    if model.store.count("trainable") > 20000:
        raise ConfigError(
            "grad_check is meant for audit-scale configs (<= 20k trainable parameters); "
            f"this model has {model.store.count('trainable')}"
        )
    audit_model = build(dataclasses.replace(model.config, dtype="float64"))
    loss_name = "bbce" if cfg.task == "shadow" else "bce_iou"
    audit = grad_check(audit_model, loss_name, sample)
    if not audit.passed:
        raise NumericError(f"pre-training gradient audit failed: {audit.failures()}")
    return audit


def evaluate(model, samples, task="cod"):
    """Eval-mode predictions scored with the metric suite; deterministic."""
    data = _prepare(samples, model.config, task)

    def predict(s):
        logits = model.logits(s.image[None], mode="eval")
        pred = 1.0 / (1.0 + np.exp(-logits[0, 0].astype(np.float64)))
        return s.id, pred, s.mask[0].astype(np.float64)

    return evaluate_pairs([predict(s) for s in data])


# ---------------------------------------------------------------------------
# gradient audit

@dataclass
class GradCheckReport:
    tolerance: float
    floor: float
    groups: dict = field(default_factory=dict)   # name -> (max_rel_err, max_abs_err, ok)

    @property
    def passed(self):
        return all(ok for _, _, ok in self.groups.values())

    def failures(self):
        return [n for n, (_, _, ok) in self.groups.items() if not ok]

    def format(self):
        width = max(len(n) for n in self.groups) + 2
        lines = [f"{'group':<{width}}{'max_rel':>12}  {'max_abs':>12}  status"]
        for name, (rel, abs_err, ok) in self.groups.items():
            lines.append(f"{name:<{width}}{rel:>12.3e}  {abs_err:>12.3e}  "
                         f"{'ok' if ok else 'FAIL'}")
        return "\n".join(lines)


def grad_check(model, loss_name, sample, tolerance=1e-4, h=1e-5, floor=1e-8):
    """Central finite differences vs analytic gradients, every trainable parameter.

    Requires a float64 model; batch norm runs in eval mode. A parameter passes
    when |analytic - numeric| <= max(floor, tolerance * max(|analytic|, |numeric|)).

    The loss surface has kinks (ReLU, max pooling); when the +/-h window happens
    to straddle one, the central difference is not an estimate of the local
    derivative at all. A failing coordinate is therefore re-checked at h/10,
    h/100 and h/1000 and accepted only if the difference converges onto the
    analytic value (the kink moves out of the window); a genuinely wrong
    gradient stays wrong at every step size and still fails.
    """
    if model.config.dtype != "float64":
        raise ConfigError("gradient audit requires a float64 model")
    losses = {"bce_iou": lambda z, y: bce_iou_loss(z, y).total, "bbce": bbce_loss}
    if loss_name not in losses:
        raise ConfigError(f"loss must be one of {sorted(losses)}, got {loss_name!r}")
    loss_fn = losses[loss_name]
    image = sample.image[None].astype(np.float64)
    target = sample.mask[None].astype(np.float64)

    def loss_value():
        logits, _ = model.run(image, mode="eval")
        return float(loss_fn(logits, target).data)

    logits, pv = model.run(image, mode="eval")
    ad.backward(loss_fn(logits, target))
    analytic = pv.grads()

    report = GradCheckReport(tolerance=tolerance, floor=floor)
    for name, entry in model.store.param_items("trainable"):
        an = analytic.get(name)
        if an is None:
            an = np.zeros_like(entry.array)
        if not np.all(np.isfinite(an)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        arr = entry.array
        flat = arr.ravel()
        max_rel = 0.0
        max_abs = 0.0
        ok = True
        an_flat = an.ravel()

        def central_diff(i, step):
            keep = flat[i]
            flat[i] = keep + step
            hi = loss_value()
            flat[i] = keep - step
            lo = loss_value()
            flat[i] = keep
            return (hi - lo) / (2 * step)

        for i in range(flat.size):
            a = an_flat[i]
            fd = central_diff(i, h)
            err = abs(a - fd)
            denom = max(abs(a), abs(fd))
            if err > max(floor, tolerance * denom):
                # kink suspicion: shrink the window; accept only on convergence
                for shrink in (10.0, 100.0, 1000.0):
                    fd = central_diff(i, h / shrink)
                    err = abs(a - fd)
                    denom = max(abs(a), abs(fd))
                    if err <= max(floor, tolerance * denom):
                        break
            max_abs = max(max_abs, err)
            if denom > 0:
                max_rel = max(max_rel, err / denom)
            if err > max(floor, tolerance * denom):
                ok = False
        report.groups[name] = (max_rel, max_abs, ok)
    return report
