"""Dual-loss training: task cross-entropy plus attention alignment.

The alignment term pulls each layer's guided class-row attention toward the
sample's teacher map through a smoothed KL divergence; there is no manual
weighting coefficient between the two losses (the gate network arbitrates
the pathways instead). Training is staged: a plain pretrain of the backbone,
then an interaction finetune that freezes it and trains only the
interaction queries, the gate nets, and the head.

Every run is fully determined by its seed: dataset, initialization, query
sync noise, and batch order all derive from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, cross_entropy, kl_rows, kl_to_target, reverse_gradients
from .data import Dataset, DatasetSpec, gen_synthetic
from .model import (
    ModelConfig,
    as_leaves,
    forward,
    freeze_mask,
    init_params,
    save_checkpoint,
    sync_interaction_queries,
)

STAGES = ("pretrain", "finetune", "two-stage")
FREEZE_CHOICES = ("auto", "pretrain", "interaction-finetune")
MOMENTUM = 0.9
FINETUNE_LR_FRACTION = 1.0 / 3.0  # 0.03 pretrain -> 0.01 finetune


@dataclass(frozen=True)
class Switches:
    """Ablation switchboard: interaction queries, alignment constraint, gates."""

    iq: bool = True
    ic: bool = True
    gc: bool = True

    @property
    def tag(self) -> str:
        return f"iq{int(self.iq)}_ic{int(self.ic)}_gc{int(self.gc)}"


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch: int = 32
    lr: float = 0.03
    seed: int = 0
    lam: float = 1e-3        # KL smoothing toward uniform
    freeze: str = "auto"
    stage: str = "two-stage"

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.freeze not in FREEZE_CHOICES:
            raise ValueError(f"freeze must be one of {FREEZE_CHOICES}")
        if self.freeze != "auto" and self.stage == "two-stage":
            raise ValueError("freeze overrides apply to single-stage runs only")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must be in [0, 1)")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    switches: Switches = field(default_factory=Switches)


@dataclass
class LossBreakdown:
    task: float
    alignment: float

    @property
    def total(self) -> float:
        return self.task + self.alignment


@dataclass
class ArrayDataset:
    """Duck-typed stand-in for Dataset built from raw arrays (estimator path)."""

    images: np.ndarray
    labels: np.ndarray
    teachers: np.ndarray | None
    train_idx: np.ndarray
    val_idx: np.ndarray


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def class_row_distribution(attn: Tensor) -> Tensor:
    """Head-averaged class-token attention over patches, renormalized.

    attn is (B, H, T, T); the result is (B, N): row 0 (the class token's
    distribution) with the class-token column removed and rescaled to sum 1.
    """
    avg = attn.mean(axis=1)          # (B, T, T)
    row = avg[:, 0, 1:]              # (B, N)
    return row / row.sum(axis=-1, keepdims=True)


def class_row_distribution_np(attn: np.ndarray) -> np.ndarray:
    """ndarray twin of class_row_distribution for analysis paths."""
    avg = np.asarray(attn).mean(axis=1)
    row = avg[:, 0, 1:]
    return row / row.sum(axis=-1, keepdims=True)


def alignment_loss(trace, teachers: np.ndarray, lam: float,
                   pathway: str = "guided") -> Tensor:
    """Mean over layers of KL(student class row || smoothed teacher).

    ``teachers`` is (B, N) and must match the model's patch count. The
    supervised pathway is the guided attention; ``pathway="visual"`` moves
    the constraint onto the original queries instead.
    """
    teachers = np.asarray(teachers)
    terms = []
    for layer in trace:
        attn = layer.guided_t if pathway == "guided" else layer.visual_t
        if attn is None:
            raise ValueError(f"{pathway} attention missing from trace")
        n = attn.shape[-1] - 1
        if teachers.shape[-1] != n:
            raise ValueError(
                f"teacher length {teachers.shape[-1]} != patch count {n}")
        row = class_row_distribution(attn)
        terms.append(kl_to_target(row, teachers, lam))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def total_loss(logits: Tensor, labels: np.ndarray, trace,
               teachers: np.ndarray | None, lam: float,
               switches: Switches) -> tuple[Tensor, LossBreakdown]:
    """Task cross-entropy plus (when the constraint is on) the alignment
    term, summed with no weighting coefficient."""
    task = cross_entropy(logits, labels)
    if switches.ic:
        if teachers is None:
            raise ValueError("alignment constraint needs teacher maps")
        pathway = "guided" if switches.iq else "visual"
        align = alignment_loss(trace, teachers, lam, pathway=pathway)
        loss = task + align
        breakdown = LossBreakdown(float(task.data), float(align.data))
    else:
        loss = task
        breakdown = LossBreakdown(float(task.data), 0.0)
    return loss, breakdown


def alignment_loss_np(trace_rows: np.ndarray, teacher: np.ndarray,
                      lam: float) -> float:
    """Reference scalar evaluation for a single sample: mean over layers of
    kl_rows on already-extracted class rows (L, N)."""
    vals = [kl_rows(row, teacher, lam) for row in np.asarray(trace_rows)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class MomentumSGD:
    """Plain SGD with momentum and cosine learning-rate decay over the stage."""

    def __init__(self, trainable: dict[str, bool], lr: float, total_steps: int):
        self.trainable = trainable
        self.lr = lr
        self.total_steps = max(1, total_steps)
        self.step_count = 0
        self.velocity: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        t = min(self.step_count, self.total_steps)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        lr = self.current_lr()
        for name, flag in self.trainable.items():
            if not flag:
                continue  # frozen parameters are never touched
            g = grads[name]
            v = self.velocity.get(name)
            v = g if v is None else MOMENTUM * v + g
            self.velocity[name] = v
            params[name] -= (lr * v).astype(params[name].dtype)
        self.step_count += 1


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    steps: int
    task: float
    alignment: float
    train_acc: float
    val_acc: float
    g1: list[float]
    g2: list[float]

    def format(self) -> str:
        g1 = ",".join(f"{v:.6f}" for v in self.g1)
        g2 = ",".join(f"{v:.6f}" for v in self.g2)
        return (f"epoch={self.epoch} stage={self.stage} steps={self.steps} "
                f"task={self.task:.6f} align={self.alignment:.6f} "
                f"train_acc={self.train_acc:.4f} val_acc={self.val_acc:.4f} "
                f"g1={g1} g2={g2}")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochRecord]
    log_lines: list[str]
    best_val: float
    steps_to_target: int | None = None


def _forward_mode(stage: str, switches: Switches) -> dict:
    if stage == "pretrain":
        return dict(interaction=False)
    return dict(interaction=switches.iq, gate_net=switches.gc)


def finetune_trainable(params: dict[str, np.ndarray],
                       switches: Switches) -> dict[str, bool]:
    """Trainable set for the finetune stage under the ablation switches.

    With interaction queries on, the backbone freezes and only the new
    pathway and head train. Supervising the original queries instead (iq
    off, ic on) unfreezes them. With everything off this is plain continued
    training of the whole network.
    """
    if switches.iq:
        def flag(name: str) -> bool:
            if ".wq2" in name:
                return True
            if ".gate_" in name:
                return switches.gc
            return name in ("head_w", "head_b")
        return {name: flag(name) for name in params}
    if switches.ic:
        return {name: name.endswith(".wq") or name in ("head_w", "head_b")
                for name in params}
    return {name: True for name in params}


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def _val_accuracy(ds: Dataset, params: dict[str, np.ndarray], cfg: RunConfig,
                  mode: dict) -> float:
    leaves = as_leaves(params)
    correct = 0
    idx = ds.val_idx
    for lo in range(0, len(idx), cfg.train.batch):
        sel = idx[lo:lo + cfg.train.batch]
        res = forward(ds.images[sel], leaves, cfg.model, **mode)
        correct += int(np.sum(np.argmax(res.logits.data, -1) == ds.labels[sel]))
    return correct / len(idx)


def run_stage(stage: str, cfg: RunConfig, ds: Dataset,
              params: dict[str, np.ndarray],
              *,
              log: list[str],
              steps_offset: int = 0,
              stop_at_train_acc: float | None = None,
              ) -> tuple[list[EpochRecord], int, int | None]:
    """Train one stage in place; returns (records, steps_done, steps_at_target)."""
    tr = cfg.train
    switches = cfg.switches
    mode = _forward_mode(stage, switches)
    if stage == "pretrain":
        trainable = freeze_mask(params, "pretrain")
        use_align = False
    else:
        if tr.freeze == "pretrain":
            trainable = freeze_mask(params, "pretrain")
        elif tr.freeze == "interaction-finetune":
            trainable = freeze_mask(params, "interaction-finetune")
        else:
            trainable = finetune_trainable(params, switches)
        use_align = switches.ic
        if switches.iq:
            sync_interaction_queries(params, cfg.model, seed=tr.seed + 101)

    lr = tr.lr if stage == "pretrain" else tr.lr * FINETUNE_LR_FRACTION
    n_train = len(ds.train_idx)
    steps_per_epoch = math.ceil(n_train / tr.batch)
    opt = MomentumSGD(trainable, lr, total_steps=tr.epochs * steps_per_epoch)

    records: list[EpochRecord] = []
    steps = 0
    steps_at_target: int | None = None
    # Running-window train accuracy gives sub-epoch resolution for the
    # steps-to-target clock (window of ~512 recent training samples,
    # capped at one epoch for tiny datasets).
    window_batches = min(max(4, math.ceil(512 / tr.batch)), steps_per_epoch)
    window: list[float] = []
    layers = cfg.model.layers
    stop = False
    for epoch in range(1, tr.epochs + 1):
        rng = np.random.default_rng((tr.seed, 7, steps_offset + epoch))
        order = ds.train_idx[rng.permutation(n_train)]
        task_sum = align_sum = acc_sum = 0.0
        g1_sum = np.zeros(layers)
        g2_sum = np.zeros(layers)
        weight = 0
        for lo in range(0, n_train, tr.batch):
            sel = order[lo:lo + tr.batch]
            leaves = as_leaves(params, trainable)
            res = forward(ds.images[sel], leaves, cfg.model, **mode)
            teachers = ds.teachers[sel] if use_align else None
            loss, breakdown = total_loss(res.logits, ds.labels[sel], res.trace,
                                         teachers, tr.lam,
                                         switches if stage != "pretrain"
                                         else Switches(iq=False, ic=False, gc=False))
            grads = reverse_gradients(loss, leaves)
            opt.step(params, grads)
            steps += 1
            b = len(sel)
            weight += b
            acc = _accuracy(res.logits.data, ds.labels[sel])
            task_sum += breakdown.task * b
            align_sum += breakdown.alignment * b
            acc_sum += acc * b
            for li, layer in enumerate(res.trace):
                g1_sum[li] += float(layer.gates[..., 0].mean()) * b
                g2_sum[li] += float(layer.gates[..., 1].mean()) * b
            if stop_at_train_acc is not None and steps_at_target is None:
                window.append(acc)
                if len(window) > window_batches:
                    window.pop(0)
                if (len(window) == window_batches
                        and sum(window) / window_batches >= stop_at_train_acc):
                    steps_at_target = steps_offset + steps
                    stop = True
                    break
        val_acc = _val_accuracy(ds, params, cfg, mode)
        rec = EpochRecord(
            stage=stage, epoch=epoch, steps=steps_offset + steps,
            task=task_sum / weight, alignment=align_sum / weight,
            train_acc=acc_sum / weight, val_acc=val_acc,
            g1=list(g1_sum / weight), g2=list(g2_sum / weight))
        records.append(rec)
        log.append(rec.format())
        if stop:
            break
    return records, steps, steps_at_target


def train(cfg: RunConfig,
          params: dict[str, np.ndarray] | None = None,
          dataset: Dataset | None = None,
          out_dir: str | Path | None = None,
          header: list[str] | None = None,
          stop_at_train_acc: float | None = None,
          ) -> TrainResult:
    """Run the configured stage(s); optionally persist logs and checkpoints.

    The metrics log starts with the resolved configuration header, then one
    record per epoch. Checkpoints are written at the end and at the best
    validation accuracy."""
    ds = dataset if dataset is not None else gen_synthetic(cfg.data, cfg.train.seed)
    if params is None:
        params = init_params(cfg.model, seed=cfg.train.seed)
    else:
        params = {k: v.copy() for k, v in params.items()}

    log: list[str] = list(header) if header else []
    history: list[EpochRecord] = []
    stages = (["pretrain", "finetune"] if cfg.train.stage == "two-stage"
              else [cfg.train.stage])
    steps_offset = 0
    steps_to_target = None
    best_val = -1.0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for stage in stages:
        records, done, at_target = run_stage(
            stage, cfg, ds, params, log=log, steps_offset=steps_offset,
            stop_at_train_acc=stop_at_train_acc if stage == stages[-1] else None)
        history.extend(records)
        steps_offset += done
        if at_target is not None:
            steps_to_target = at_target
        for rec in records:
            if rec.val_acc > best_val:
                best_val = rec.val_acc
                if out is not None:
                    save_checkpoint(out / "checkpoint_best.ivit", cfg.model, params)
    if out is not None:
        save_checkpoint(out / "checkpoint.ivit", cfg.model, params)
        (out / "metrics.log").write_text("\n".join(log) + "\n")
    return TrainResult(params=params, history=history, log_lines=log,
                       best_val=best_val, steps_to_target=steps_to_target)


ALL_SWITCH_COMBOS = [Switches(iq=bool(i), ic=bool(c), gc=bool(g))
                     for i in (0, 1) for c in (0, 1) for g in (0, 1)]


def ablate(cfg: RunConfig, switches: Switches,
           out_dir: str | Path | None = None,
           dataset: Dataset | None = None,
           header: list[str] | None = None) -> TrainResult:
    """One ablation cell: the same two-stage recipe under altered switches."""
    run_cfg = replace(cfg, switches=switches)
    return train(run_cfg, dataset=dataset, out_dir=out_dir, header=header)


def ablate_grid(cfg: RunConfig, out_dir: str | Path,
                header_fn=None) -> list[tuple[Switches, TrainResult]]:
    """All 8 switch combinations with the shared seed; emits per-cell logs
    and a summary table. ``header_fn(cell_cfg)`` supplies each cell's
    effective-configuration header so a cell log is byte-identical to the
    plain training run with that configuration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = gen_synthetic(cfg.data, cfg.train.seed)
    results = []
    summary = ["tag iq ic gc final_val_acc best_val_acc"]
    for sw in ALL_SWITCH_COMBOS:
        cell_cfg = replace(cfg, switches=sw)
        header = header_fn(cell_cfg) if header_fn else None
        res = train(cell_cfg, dataset=ds, out_dir=out / sw.tag, header=header)
        results.append((sw, res))
        final_val = res.history[-1].val_acc
        summary.append(f"{sw.tag} {int(sw.iq)} {int(sw.ic)} {int(sw.gc)} "
                       f"{final_val:.4f} {res.best_val:.4f}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return results
