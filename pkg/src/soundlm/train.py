"""Staged training: schedules, dataset blending, freezing, and the step loop.

A stage freezes named parameter groups (backbone / encoder / adapter /
embeddings); frozen groups are skipped entirely by the optimizer so their
bytes never change. The optimizer is Adam with decoupled weight decay,
betas (0.9, 0.95), and a global gradient-norm clip of 1.0 over the
unfrozen parameters. Batches are drawn i.i.d. from a weighted dataset
blend, packed first-fit-decreasing, and everything is deterministic given
the stage seed.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, TrainingDiverged
from .layout import pack

GROUP_NAMES = ("backbone", "encoder", "adapter", "embeddings")

# csv bucket per task
TASK_BUCKET = {
    "text": "text",
    "t2a": "gen",
    "enrich": "gen",
    "dialogue": "gen",
    "reflect": "gen",
    "understand": "und",
}


@dataclass
class StageConfig:
    name: str
    total_steps: int
    peak_lr: float
    schedule: str = "cosine"
    warmup: int = 0
    tokens_per_batch: int = 4096
    pack_budget: int = 256
    frozen: tuple = ()
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.warmup > self.total_steps:
            raise ConfigError("warmup must not exceed total steps")
        bad = [g for g in self.frozen if g not in GROUP_NAMES and g != "none"]
        if bad:
            raise ConfigError(f"unknown frozen groups {bad}")


@dataclass
class BlendSpec:
    weights: list  # [(dataset_id, weight)]

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("blend needs at least one dataset")
        for name, w in self.weights:
            if w <= 0:
                raise ConfigError(f"dataset {name!r} has non-positive weight {w}")

    def probs(self):
        total = sum(w for _, w in self.weights)
        return [w / total for _, w in self.weights]

    @classmethod
    def pretraining_default(cls):
        # generation share already contains its 2x up-sampling
        return cls([("t2a", 0.4), ("understand", 0.3), ("text", 0.3)])

    @classmethod
    def sft_default(cls, main_ids):
        # understanding holds 20% of each SFT stage
        share = 0.8 / len(main_ids)
        return cls([(d, share) for d in main_ids] + [("understand", 0.2)])


def lr_at(stage, step):
    """Learning rate at 1-based ``step``; lr(warmup) == peak, cosine ends ~0."""
    if stage.warmup > 0 and step <= stage.warmup:
        return stage.peak_lr * step / stage.warmup
    if stage.schedule == "constant":
        return stage.peak_lr
    span = max(1, stage.total_steps - stage.warmup)
    frac = (step - stage.warmup) / span
    return stage.peak_lr * 0.5 * (1.0 + np.cos(np.pi * min(1.0, frac)))


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr, skip=lambda name: False):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if skip(name):
                continue
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p -= lr * (update + self.weight_decay * p)


def clip_global_norm(grads, max_norm, skip=lambda name: False):
    total = 0.0
    for name, g in grads.items():
        if not skip(name):
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name, g in grads.items():
            if not skip(name):
                g *= scale
    return norm


def blend(datasets, spec, rng):
    """Infinite sample stream: i.i.d. dataset choice, shuffled epochs within.

    Empty datasets are skipped with a warning counter; a sole dataset
    degenerates to an endless shuffle of itself.
    """
    names = [name for name, _ in spec.weights]
    missing = [n for n in names if n not in datasets]
    if missing:
        raise ConfigError(f"blend references unknown datasets {missing}")
    probs = np.asarray(spec.probs())
    cursors = {n: [] for n in names}
    warnings = {"empty_dataset_draws": 0}

    def refill(name):
        order = rng.permutation(len(datasets[name]))
        cursors[name] = [datasets[name][i] for i in order]

    def stream():
        if all(len(datasets[n]) == 0 for n in names):
            raise InputError("every blended dataset is empty")
        while True:
            name = names[int(rng.choice(len(names), p=probs))]
            if not datasets[name]:
                warnings["empty_dataset_draws"] += 1
                continue
            if not cursors[name]:
                refill(name)
            yield cursors[name].pop()

    return stream(), warnings


def _freeze_predicate(model, frozen):
    frozen = tuple(g for g in frozen if g != "none")

    def skip(name):
        return model.param_group(name) in frozen

    return skip


def run_stage(model, datasets, stage, blend_spec=None, log_path=None, hooks=None):
    """Train ``model`` in place for one stage; returns per-step metric rows.

    Raises TrainingDiverged with the offending step and batch ids if the
    loss goes non-finite.
    """
    if blend_spec is None:
        blend_spec = BlendSpec([(name, 1.0) for name in sorted(datasets)])
    for name in datasets:
        for s in datasets[name]:
            if len(s) > stage.pack_budget:
                raise InputError(
                    f"sample {s.id!r} ({len(s)} tokens) exceeds pack budget "
                    f"{stage.pack_budget}"
                )
    rng = np.random.default_rng(stage.seed)
    stream, _ = blend(datasets, blend_spec, rng)
    opt = AdamW(model.params, weight_decay=stage.weight_decay)
    skip = _freeze_predicate(model, stage.frozen)
    rows = []
    for step in range(1, stage.total_steps + 1):
        batch, total = [], 0
        while total < stage.tokens_per_batch:
            s = next(stream)
            batch.append(s)
            total += len(s)
        packs = pack(batch, budget=stage.pack_budget)
        loss, parts, grads = model.loss(packs, with_grads=True)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step} of stage {stage.name!r}",
                step=step,
                sample_ids=[s.id for s in batch],
            )
        lr = lr_at(stage, step)
        clip_global_norm(grads, stage.clip_norm, skip)
        opt.step(model.params, grads, lr, skip)
        row = {"step": step, "lr": lr, "loss": loss}
        for bucket in ("text", "gen", "und"):
            num = den = 0.0
            for task, (s_, w_) in parts.items():
                if TASK_BUCKET.get(task) == bucket:
                    num += s_
                    den += w_
            row[f"loss_{bucket}"] = num / den if den else float("nan")
        rows.append(row)
        if hooks:
            for hook in hooks:
                hook(step, model, row)
    if log_path:
        write_metrics_csv(rows, log_path)
    return rows


def write_metrics_csv(rows, path):
    fields = ["step", "lr", "loss_text", "loss_gen", "loss_und", "loss"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fields})


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return value


def overfit_check(model, samples, steps, lr=3e-3, seed=0, tokens_per_batch=512,
                  pack_budget=None):
    """Convenience harness: train on a fixed set and report the final loss."""
    if pack_budget is None:
        pack_budget = min(256, model.cfg.context)
    stage = StageConfig(
        name="overfit",
        total_steps=steps,
        peak_lr=lr,
        schedule="constant",
        warmup=min(20, steps // 10),
        tokens_per_batch=tokens_per_batch,
        pack_budget=pack_budget,
        seed=seed,
    )
    rows = run_stage(model, {"set": list(samples)}, stage)
    return rows[-1]["loss"], rows
