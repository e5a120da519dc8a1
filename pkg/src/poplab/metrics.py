"""Open-loop forecast metrics and the observation-length sweep.

All four metrics follow the same selection rule: keep the k most
probable modes (probability ties broken by lower mode index), then pick
the one whose endpoint is closest to the ground-truth endpoint (again
ties to the lower index). MinADE is the mean per-step displacement of
that mode, MinFDE its endpoint displacement, a miss is MinFDE > 2.0 m,
and brier adds (1 - p_best)^2 to MinFDE.

Note that because selection is by endpoint, MinADE_k is not forced to
be monotone in k (a newly admitted mode can win the endpoint contest
with a worse average displacement); MinFDE_k is monotone.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .predictor import PredictionSet
from .scene import MaskSpec, Scene, apply_mask

MISS_THRESHOLD = 2.0


def _top_k_best(preds: np.ndarray, probs: np.ndarray, gt: np.ndarray, k: int):
    """Returns (best trajectory index into preds, its probability)."""
    preds = np.asarray(preds, dtype=float)
    probs = np.asarray(probs, dtype=float)
    gt = np.asarray(gt, dtype=float)
    n = preds.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} out of range for {n} modes")
    if probs.shape != (n,):
        raise ParameterError(f"probs shape {probs.shape} != ({n},)")
    # stable sort on -prob keeps index order among ties
    order = np.argsort(-probs, kind="stable")[:k]
    fde = np.linalg.norm(preds[order, -1] - gt[-1], axis=-1)
    best = order[int(np.argmin(fde))]
    return int(best), float(probs[best])


def min_ade(preds, probs, gt, k: int) -> float:
    best, _ = _top_k_best(preds, probs, gt, k)
    steps = np.linalg.norm(np.asarray(preds)[best] - np.asarray(gt), axis=-1)
    return float(steps.mean())


def min_fde(preds, probs, gt, k: int) -> float:
    best, _ = _top_k_best(preds, probs, gt, k)
    return float(np.linalg.norm(np.asarray(preds)[best, -1]
                                - np.asarray(gt)[-1]))


def miss_rate(preds, probs, gt, k: int) -> float:
    """Per-instance miss indicator (aggregate by averaging over agents)."""
    return float(min_fde(preds, probs, gt, k) > MISS_THRESHOLD)


def brier_min_fde(preds, probs, gt, k: int) -> float:
    best, p = _top_k_best(preds, probs, gt, k)
    fde = float(np.linalg.norm(np.asarray(preds)[best, -1]
                               - np.asarray(gt)[-1]))
    return fde + (1.0 - p) ** 2


@dataclass
class OpenLoopReport:
    split_id: str
    rows: list = field(default_factory=list)
    # each row: dict(obs_setting, k, minade, minfde, mr, brier_minfde, n_scenes)

    def row(self, obs_setting, k):
        for r in self.rows:
            if r["obs_setting"] == str(obs_setting) and r["k"] == k:
                return r
        raise KeyError((obs_setting, k))


def constant_velocity_baseline(scene: Scene) -> PredictionSet:
    """Single-mode oracle-free baseline: hold the latest speed and yaw."""
    anchor = scene.focal.latest_state()
    steps = np.arange(1, scene.t_f + 1)[:, None] * scene.dt
    vel = np.array([np.cos(anchor.yaw), np.sin(anchor.yaw)]) * anchor.v
    traj = np.array([anchor.x, anchor.y]) + steps * vel
    traj = traj[None]  # K=1
    return PredictionSet(
        proposals=traj.copy(), refined=traj.copy(),
        scales=np.ones_like(traj), probs=np.array([1.0]),
    )


class CvPredictor:
    """Adapter giving the constant-velocity baseline the model interface."""

    def predict(self, scene: Scene):
        return constant_velocity_baseline(scene), None


def _remask_scene(scene: Scene, setting, rng) -> Scene:
    """Re-mask every agent per the sweep setting (int length or 'random').

    The per-scene 'random' length is drawn from the supplied generator
    so the whole sweep is reproducible from one seed.
    """
    if setting == "random":
        length = int(rng.integers(1, scene.t_h + 1))
    else:
        length = int(setting)
    out = scene.copy()
    spec = MaskSpec.truncate_to_length(length)
    out.agents = [apply_mask(h, spec) for h in out.agents]
    return out


def observation_sweep(model, dataset, lengths, ks=(1, 6), seed: int = 0,
                      split_id: str = "eval") -> OpenLoopReport:
    """Evaluate ``model.predict`` across observation-length settings.

    lengths: iterable of ints in [1, T_H] and/or the string 'random'.
    """
    report = OpenLoopReport(split_id=split_id)
    for setting in lengths:
        rng = np.random.default_rng([seed, 7 if setting == "random" else 0])
        masked = [_remask_scene(s, setting, rng) for s in dataset]
        preds = []
        for s in masked:
            pred, _ = model.predict(s)
            preds.append(pred)
        for k in ks:
            ades, fdes, misses, briers = [], [], [], []
            for s, pred in zip(masked, preds):
                gt = s.futures[s.focal_index]
                kk = min(k, pred.refined.shape[0])
                ades.append(min_ade(pred.refined, pred.probs, gt, kk))
                fdes.append(min_fde(pred.refined, pred.probs, gt, kk))
                misses.append(miss_rate(pred.refined, pred.probs, gt, kk))
                briers.append(brier_min_fde(pred.refined, pred.probs, gt, kk))
            report.rows.append({
                "obs_setting": str(setting), "k": k,
                "minade": float(np.mean(ades)),
                "minfde": float(np.mean(fdes)),
                "mr": float(np.mean(misses)),
                "brier_minfde": float(np.mean(briers)),
                "n_scenes": len(masked),
            })
    return report


REPORT_COLUMNS = ["obs_setting", "k", "minade", "minfde", "mr",
                  "brier_minfde", "n_scenes"]


def write_report_csv(report: OpenLoopReport, path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in report.rows:
                w.writerow([r[c] if c in ("obs_setting",)
                            else repr(r[c]) if isinstance(r[c], float)
                            else r[c]
                            for c in REPORT_COLUMNS])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_report_csv(path: str) -> OpenLoopReport:
    report = OpenLoopReport(split_id=os.path.basename(path))
    with open(path, "r", newline="") as f:
        for rec in csv.DictReader(f):
            report.rows.append({
                "obs_setting": rec["obs_setting"],
                "k": int(rec["k"]),
                "minade": float(rec["minade"]),
                "minfde": float(rec["minfde"]),
                "mr": float(rec["mr"]),
                "brier_minfde": float(rec["brier_minfde"]),
                "n_scenes": int(rec["n_scenes"]),
            })
    return report
