"""Losses and the staged training curriculum.

Four ways to train the same network:

* ``teacher``  — complete observations, trajectory losses only.
* ``scratch``  — masked observations, trajectory losses only (the
  no-frills reference the ablations compare against).
* ``ssl``      — masked observations plus a history-reconstruction
  branch; total = trajectory losses + beta * reconstruction error over
  exactly the steps the mask removed.
* ``distill``  — masked student, frozen full-observation teacher run on
  the same scene; total = trajectory losses + lam * feature-matching.

All losses are evaluated in the focal agent's local frame (displacement
errors are rigid-invariant, so values agree with any fixed frame).
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Optimizer, OptimizerConfig, Tensor
from .errors import ConfigurationError, ContractViolation, ParameterError
from .harness.checkpoint import Checkpoint, make_checkpoint
from .metrics import observation_sweep
from .predictor import FeatureTaps, ModelConfig, ModelOutput, Predictor
from .scene import MaskSpec, Scene, apply_mask

STAGES = ("teacher", "scratch", "ssl", "distill")
STRATEGIES = ("scratch", "scratch+ssl", "scratch+distill",
              "scratch+ssl+distill")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 8
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 0.5
    mask: MaskSpec | None = None  # default: fresh random truncation per agent
    seed: int = 0
    lr: float = 5e-4
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"unknown stage {self.stage!r}")
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.stage == "teacher" and self.mask is not None:
            raise ParameterError(
                "the teacher trains on complete observations; no mask spec")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")


@dataclass
class LossBreakdown:
    """Scalar loss tensors. ``total`` is always composed in the fixed
    order  ((l_init + l_refine) + alpha*l_cls) + beta*l_recons
    + lam*l_d  so it can be reproduced exactly from the parts."""

    l_init: Tensor
    l_refine: Tensor
    l_cls: Tensor
    l_recons: Tensor
    l_d: Tensor
    total: Tensor

    def values(self) -> dict:
        return {name: float(getattr(self, name).data)
                for name in ("l_init", "l_refine", "l_cls", "l_recons",
                             "l_d", "total")}

    def with_recons(self, l_recons: Tensor, beta: float) -> "LossBreakdown":
        return LossBreakdown(self.l_init, self.l_refine, self.l_cls,
                             l_recons, self.l_d,
                             self.total + beta * l_recons)

    def with_distill(self, l_d: Tensor, lam: float) -> "LossBreakdown":
        return LossBreakdown(self.l_init, self.l_refine, self.l_cls,
                             self.l_recons, l_d,
                             self.total + lam * l_d)


# -- losses -------------------------------------------------------------------


def nll_wta(trajectories, scales, gt_future):
    """Winner-take-all Laplace negative log-likelihood.

    The winner is the mode with the smallest final-displacement error
    (ties go to the lower index); the returned scalar is the mean over
    that mode's T_F x 2 entries of |delta|/b + log(2b). Only the winner
    receives gradient. ``scales=None`` means unit scales.
    """
    traj = trajectories if isinstance(trajectories, Tensor) \
        else Tensor(np.asarray(trajectories, dtype=float))
    gt = np.asarray(gt_future, dtype=float)
    if not np.all(np.isfinite(gt)):
        raise ContractViolation("ground truth future must be finite")
    k = traj.shape[0]
    if k < 1:
        raise ContractViolation("need at least one mode")
    if scales is None:
        scales = Tensor(np.ones_like(traj.data))
    elif not isinstance(scales, Tensor):
        scales = Tensor(np.asarray(scales, dtype=float))
    if np.any(scales.data <= 0):
        raise ContractViolation("Laplace scales must be strictly positive")

    endpoint = np.linalg.norm(traj.data[:, -1, :] - gt[-1], axis=-1)
    best = int(np.argmin(endpoint))
    diff = dc.getitem(traj, best) - Tensor(gt)
    b = dc.getitem(scales, best)
    l = (dc.abs_(diff) / b + dc.log(b * 2.0)).mean()
    return l, best


def loss_cls(probs, best_mode_index: int) -> Tensor:
    """Cross-entropy against the (detached) winner choice."""
    p = probs if isinstance(probs, Tensor) \
        else Tensor(np.asarray(probs, dtype=float))
    return -dc.log(dc.getitem(p, int(best_mode_index)))


def loss_mf(out: ModelOutput, gt_future_local, alpha: float = 1.0
            ) -> LossBreakdown:
    """Trajectory losses: WTA NLL on proposals (unit scales) + WTA NLL
    on refined (predicted scales) + alpha * mode classification."""
    l_init, _ = nll_wta(out.proposals_local, None, gt_future_local)
    l_refine, best = nll_wta(out.refined_local, out.scales, gt_future_local)
    l_cls = loss_cls(out.probs, best)
    zero = Tensor(0.0)
    total = (l_init + l_refine) + alpha * l_cls
    return LossBreakdown(l_init, l_refine, l_cls, zero, zero, total)


def loss_recons(recon, target_states, original_mask, applied_mask) -> Tensor:
    """Mean squared position error over steps that were observed in the
    raw history but removed by the mask procedure. Both inputs must be
    expressed in the same frame. Zero when nothing was dropped."""
    om = np.asarray(original_mask, dtype=bool)
    am = np.asarray(applied_mask, dtype=bool)
    if np.any(am & ~om):
        raise ContractViolation(
            "applied mask marks steps valid that never were")
    dropped = np.where(om & ~am)[0]
    if dropped.size == 0:
        return Tensor(0.0)
    r = recon if isinstance(recon, Tensor) \
        else Tensor(np.asarray(recon, dtype=float))
    pred = dc.getitem(dc.getitem(r, dropped), (slice(None), slice(0, 2)))
    tgt = np.asarray(target_states, dtype=float)[dropped, :2]
    diff = pred - Tensor(tgt)
    return (diff * diff).mean()


def scene_recon_loss(out: ModelOutput, original: Scene,
                     masked: Scene) -> Tensor:
    """Reconstruction error pooled over every dropped step of every
    agent (mean over dropped-step coordinates scene-wide)."""
    if out.recon_local is None:
        raise ContractViolation("model output carries no reconstruction")
    total = None
    n_entries = 0
    for i, (orig_h, mask_h) in enumerate(zip(original.agents, masked.agents)):
        dropped = np.where(orig_h.mask & ~mask_h.mask)[0]
        if dropped.size == 0:
            continue
        anc = out.agent_anchors[i]
        c, s = math.cos(-anc.yaw), math.sin(-anc.yaw)
        rel = orig_h.states[dropped, :2] - [anc.x, anc.y]
        tgt = rel @ np.array([[c, -s], [s, c]]).T
        pred = dc.getitem(out.recon_local, (i, dropped))
        pred = dc.getitem(pred, (slice(None), slice(0, 2)))
        diff = pred - Tensor(tgt)
        sq = (diff * diff).sum()
        total = sq if total is None else total + sq
        n_entries += dropped.size * 2
    if total is None:
        return Tensor(0.0)
    return total * (1.0 / n_entries)


def loss_distill(student_taps: FeatureTaps, teacher_taps: FeatureTaps
                 ) -> Tensor:
    """Feature matching: per tap, mean over rows of ||diff||^2 / d,
    summed over the three taps. Teacher side never receives gradient."""
    total = Tensor(0.0)
    for s, t in ((student_taps.h_a, teacher_taps.h_a),
                 (student_taps.h_m, teacher_taps.h_m),
                 (student_taps.h_f, teacher_taps.h_f)):
        if not isinstance(s, Tensor):
            s = Tensor(np.asarray(s, dtype=float))
        t_data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=float)
        if s.shape != t_data.shape:
            raise ContractViolation(
                f"tap shape mismatch: student {s.shape} vs teacher "
                f"{t_data.shape}")
        rows, d = s.shape
        if rows == 0:
            continue
        diff = s - Tensor(t_data)
        per_row = (diff * diff).sum(axis=-1) * (1.0 / d)
        total = total + per_row.mean()
    return total


def focal_future_local(scene: Scene, anchor) -> np.ndarray:
    """Ground-truth future of the focal agent in the anchor frame."""
    fut = scene.futures[scene.focal_index]
    if fut is None:
        raise ContractViolation("focal agent has no future annotation")
    c, s = math.cos(-anchor.yaw), math.sin(-anchor.yaw)
    rel = np.asarray(fut, dtype=float) - [anchor.x, anchor.y]
    return rel @ np.array([[c, -s], [s, c]]).T


# -- stage training -----------------------------------------------------------


@dataclass
class TrainResult:
    model: Predictor
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)


def _derived_mask(cfg: StageConfig, epoch: int, scene_i: int,
                  agent_i: int) -> MaskSpec:
    base = cfg.mask if cfg.mask is not None else MaskSpec.random_length(0)
    seed = np.random.SeedSequence(
        [cfg.seed, epoch, scene_i, agent_i]).generate_state(1)[0]
    return dataclasses.replace(base, seed=int(seed))


def _masked_view(scene: Scene, cfg: StageConfig, epoch: int,
                 scene_i: int) -> Scene:
    out = scene.copy()
    out.agents = [
        apply_mask(h, _derived_mask(cfg, epoch, scene_i, i))
        for i, h in enumerate(out.agents)
    ]
    return out


def scene_loss(model: Predictor, scene: Scene, cfg: StageConfig,
               epoch: int = 0, scene_i: int = 0,
               teacher: Predictor | None = None) -> LossBreakdown:
    """One scene's full stage loss (graph attached)."""
    if cfg.stage in ("teacher",):
        view = scene
    else:
        view = _masked_view(scene, cfg, epoch, scene_i)
    out = model.forward(view, with_recon=(cfg.stage == "ssl"))
    gt_local = focal_future_local(scene, out.anchor)
    parts = loss_mf(out, gt_local, cfg.alpha)
    if cfg.stage == "ssl":
        parts = parts.with_recons(scene_recon_loss(out, scene, view),
                                  cfg.beta)
    elif cfg.stage == "distill":
        t_out = teacher.forward(scene, with_recon=False)
        parts = parts.with_distill(
            loss_distill(out.taps, t_out.taps.detached()), cfg.lam)
    return parts


LOG_COLUMNS = ["step", "lr", "l_init", "l_refine", "l_cls", "l_recons",
               "l_d", "total"]


def train_stage(model: Predictor, dataset, cfg: StageConfig,
                teacher: Predictor | None = None,
                parent_hash: str | None = None) -> TrainResult:
    """Run one stage; deterministic given (seed, dataset order)."""
    if cfg.stage == "distill" and teacher is None:
        raise ConfigurationError(
            "distill stage needs a frozen teacher "
            "(pass --teacher-checkpoint)")
    if cfg.stage == "ssl" and not model.config.recon_head:
        raise ConfigurationError(
            "ssl stage needs a model with the reconstruction branch")
    if not dataset:
        raise ConfigurationError("empty training dataset")

    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    opt_cfg = OptimizerConfig(lr=cfg.lr, weight_decay=cfg.weight_decay,
                              total_steps=cfg.epochs * n_batches)
    frozen = ("recon.",) if (cfg.stage == "distill"
                             and model.config.recon_head) else ()
    opt = Optimizer(model.store, opt_cfg, frozen=frozen)

    rng = np.random.default_rng(cfg.seed)
    log = []
    epoch_means = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_rows = []
        for b in range(n_batches):
            idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            model.store.zero_grads()
            acc = {k: 0.0 for k in LOG_COLUMNS[2:]}
            for si in idxs:
                parts = scene_loss(model, dataset[int(si)], cfg,
                                   epoch=epoch, scene_i=int(si),
                                   teacher=teacher)
                vals = parts.values()
                (parts.total * (1.0 / len(idxs))).backward()
                for k in acc:
                    acc[k] += vals[k] / len(idxs)
            lr = opt.step()
            row = {"step": opt.step_count - 1, "lr": lr, **acc}
            log.append(row)
            epoch_rows.append(acc)
        epoch_means.append({
            k: float(np.mean([r[k] for r in epoch_rows]))
            for k in LOG_COLUMNS[2:]
        })

    meta = {
        "stage": cfg.stage,
        "parent_hash": parent_hash,
        "model_config": model.config.as_dict(),
        "seed_record": {
            "seed": cfg.seed, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "lr": cfg.lr,
            "weight_decay": cfg.weight_decay, "alpha": cfg.alpha,
            "beta": cfg.beta, "lam": cfg.lam,
            "n_scenes": len(dataset),
        },
    }
    ckpt = make_checkpoint(model.store.state_arrays(), meta)
    return TrainResult(model=model, checkpoint=ckpt, log=log,
                       epoch_means=epoch_means)


def write_training_log(rows, path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in rows:
                w.writerow([r["step"]] + [repr(float(r[c]))
                                          for c in LOG_COLUMNS[1:]])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- the full curriculum and the ablation table --------------------------------


@dataclass
class StageBudget:
    """Per-stage epoch counts for the staged recipes (the base 'scratch'
    training is the teacher recipe: complete observations)."""

    teacher: int = 5
    ssl: int = 3
    distill: int = 3


def train_strategy(strategy: str, train_scenes, model_config: ModelConfig,
                   seed: int = 0, budget: StageBudget | None = None,
                   batch_size: int = 8, lr: float = 5e-4,
                   cache: dict | None = None,
                   mask: MaskSpec | None = None):
    """Build + train one ablation strategy.

    Table III reading: 'scratch' is ordinary full-observation training
    (identical to the teacher pre-train); '+ssl' and '+distill' chain
    the corresponding stages on top of that shared base. Pass ``cache``
    (a dict, reused across calls) to share the teacher/ssl runs between
    strategies of the same seed.

    Returns (TrainResult, cache).
    """
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}; "
                             f"choose from {STRATEGIES}")
    budget = budget or StageBudget()
    cache = {} if cache is None else cache
    mc = model_config

    def stage_kw(epochs):
        return dict(epochs=epochs, batch_size=batch_size, seed=seed, lr=lr)

    def teacher() -> TrainResult:
        if "teacher" not in cache:
            m = Predictor(mc, seed=seed)
            cache["teacher"] = train_stage(
                m, train_scenes,
                StageConfig("teacher", **stage_kw(budget.teacher)))
        return cache["teacher"]

    def ssl() -> TrainResult:
        if "ssl" not in cache:
            t = teacher()
            student = t.model.add_recon_head(seed=seed + 1)
            cache["ssl"] = train_stage(
                student, train_scenes,
                StageConfig("ssl", mask=mask, **stage_kw(budget.ssl)),
                parent_hash=t.checkpoint.content_hash)
        return cache["ssl"]

    if strategy == "scratch":
        res = teacher()
    elif strategy == "scratch+ssl":
        res = ssl()
    elif strategy == "scratch+distill":
        t = teacher()
        student = t.model.copy()
        res = train_stage(student, train_scenes,
                          StageConfig("distill", mask=mask,
                                      **stage_kw(budget.distill)),
                          teacher=t.model,
                          parent_hash=t.checkpoint.content_hash)
    else:  # scratch+ssl+distill
        t = teacher()
        s = ssl()
        student = s.model.copy()
        res = train_stage(student, train_scenes,
                          StageConfig("distill", mask=mask,
                                      **stage_kw(budget.distill)),
                          teacher=t.model,
                          parent_hash=s.checkpoint.content_hash)
    cache[strategy] = res
    return res, cache


ABLATION_SETTINGS = ("1", "half", "full", "random")


def run_ablation(train_scenes, eval_scenes, model_config: ModelConfig,
                 strategies=STRATEGIES, seed: int = 0,
                 budget: StageBudget | None = None, batch_size: int = 8,
                 lr: float = 5e-4, k: int = 6,
                 out_csv: str | None = None):
    """Train each strategy and evaluate it across observation lengths.

    Returns a list of row dicts: strategy + minade/minfde per setting
    (Obs = 1, T_H/2, T_H, random). Stage runs shared between strategies
    (the teacher/ssl base) are trained once."""
    t_h = model_config.t_h
    lengths = [1, t_h // 2, t_h, "random"]
    cache: dict = {}
    rows = []
    for strategy in strategies:
        res, cache = train_strategy(
            strategy, train_scenes, model_config, seed=seed, budget=budget,
            batch_size=batch_size, lr=lr, cache=cache)
        report = observation_sweep(res.model, eval_scenes, lengths,
                                   ks=(k,), seed=seed)
        row = {"strategy": strategy}
        for setting, name in zip(lengths, ABLATION_SETTINGS):
            rec = report.row(str(setting), k)
            row[f"minade_{name}"] = rec["minade"]
            row[f"minfde_{name}"] = rec["minfde"]
        rows.append(row)
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


# -- held-out diagnostics (distillation gap, reconstruction quality) ----------


def _eval_mask_view(scene: Scene, seed: int, scene_i: int) -> Scene:
    """Deterministic per-agent random-truncation masking for held-out
    evaluation (fixed protocol shared by the distill/recon diagnostics)."""
    out = scene.copy()
    masked = []
    for i, h in enumerate(out.agents):
        s = np.random.SeedSequence([seed, scene_i, i]).generate_state(1)[0]
        masked.append(apply_mask(h, MaskSpec.random_length(int(s))))
    out.agents = masked
    return out


def eval_distill_gap(student: Predictor, teacher: Predictor, scenes,
                     seed: int = 0) -> float:
    """Mean feature-matching loss between the masked student and the
    full-observation teacher over a held-out set."""
    vals = []
    for i, scene in enumerate(scenes):
        view = _eval_mask_view(scene, seed, i)
        s_out = student.forward(view, with_recon=False)
        t_out = teacher.forward(scene, with_recon=False)
        l_d = loss_distill(s_out.taps, t_out.taps.detached())
        vals.append(float(l_d.data))
    return float(np.mean(vals))


def eval_recon_error(model: Predictor, scenes, seed: int = 0) -> float:
    """Mean Euclidean position error at dropped steps, model branch."""
    errs = []
    for i, scene in enumerate(scenes):
        view = _eval_mask_view(scene, seed, i)
        out = model.forward(view, with_recon=True)
        for a, (orig_h, mask_h) in enumerate(zip(scene.agents, view.agents)):
            dropped = np.where(orig_h.mask & ~mask_h.mask)[0]
            if dropped.size == 0:
                continue
            pred = out.recon_global[a, dropped, :2]
            errs.extend(np.linalg.norm(
                pred - orig_h.states[dropped, :2], axis=1))
    return float(np.mean(errs)) if errs else 0.0


def cv_recon_error(scenes, seed: int = 0) -> float:
    """Constant-velocity oracle for the same task: extrapolate each
    agent's EARLIEST surviving observation backward in time."""
    errs = []
    for i, scene in enumerate(scenes):
        view = _eval_mask_view(scene, seed, i)
        for orig_h, mask_h in zip(scene.agents, view.agents):
            dropped = np.where(orig_h.mask & ~mask_h.mask)[0]
            if dropped.size == 0:
                continue
            first = int(np.argmax(mask_h.mask))
            x, y, yaw, v = orig_h.states[first]
            dt_steps = (dropped - first) * scene.dt
            pred = np.stack([x + v * np.cos(yaw) * dt_steps,
                             y + v * np.sin(yaw) * dt_steps], axis=1)
            errs.extend(np.linalg.norm(
                pred - orig_h.states[dropped, :2], axis=1))
    return float(np.mean(errs)) if errs else 0.0


def write_ablation_csv(rows, path: str) -> None:
    cols = ["strategy"]
    for name in ABLATION_SETTINGS:
        cols += [f"minade_{name}", f"minfde_{name}"]
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([r["strategy"]] + [repr(float(r[c]))
                                              for c in cols[1:]])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
