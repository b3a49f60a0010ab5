"""Dice and the two evaluation tasks.

Task1 scores the global model on the generic set against clean labels.
Task2 scores each center's model on its own local test set, whose labels carry
the center's deterministic annotation style.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import nets
from . import tensor as T
from .synthdata import FederationData, SegSample

REPORT_SCHEMA_VERSION = 1
PERSONALIZED_METHODS = ("single",)
_EVAL_STREAM = 0xE7A1


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise T.ShapeError("dice", pred.shape, gt.shape)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def to_mask(probs: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis; ties resolve to the lower class index (background)."""
    return np.argmax(probs, axis=-3).astype(np.uint8)


def latent_noise(seed: int, case_ids, n_samples: int, dim: int) -> np.ndarray:
    """``(S, N, D)`` standard-normal draws, one stream per case so batching does not matter."""
    out = np.empty((n_samples, len(case_ids), dim))
    for i, cid in enumerate(case_ids):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_STREAM, int(cid)]))
        out[:, i, :] = rng.standard_normal((n_samples, dim))
    return out


def _latents(psi, images: T.Tensor, noise: np.ndarray | None, n_samples: int, latent: str):
    prior = nets.forward_prior(psi, images)
    if latent == "mean":
        return [prior.mu]
    if latent != "sample":
        raise ValueError(f"unknown latent mode {latent!r}")
    if noise is None or noise.shape[0] < n_samples:
        raise ValueError("sample mode needs noise of shape (S, N, D)")
    return [nets.sample_latent(prior, noise[s]) for s in range(n_samples)]


def predict_global(theta_s, psi, images, n_samples: int = 4, noise: np.ndarray | None = None,
                   latent: str = "sample") -> np.ndarray:
    """Mean segmentation probabilities over latent draws from the prior.

    ``images`` is ``(N, 1, H, W)``; plain networks (``psi is None``) ignore
    the latent arguments.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    images = T.as_tensor(images)
    if psi is None:
        return nets.forward_seg(theta_s, images).data
    zs = _latents(psi, images, noise, n_samples, latent)
    return np.mean([nets.forward_seg(theta_s, images, z).data for z in zs], axis=0)


def predict_local(theta_s, psi, theta_p, da_mode, images, n_samples: int = 4,
                  noise: np.ndarray | None = None, latent: str = "sample",
                  field_override: nets.AdaptationField | None = None) -> np.ndarray:
    """Like :func:`predict_global` but each draw is passed through the center's adaptation."""
    if theta_p is None and field_override is None:
        return predict_global(theta_s, psi, images, n_samples, noise, latent)
    images = T.as_tensor(images)
    zs = _latents(psi, images, noise, n_samples, latent)
    h, w = images.shape[-2:]
    out = []
    for z in zs:
        seg = nets.forward_seg(theta_s, images, z)
        if field_override is not None:
            field_ = field_override
        elif da_mode == "distribution":
            field_ = nets.forward_da(theta_p, nets.broadcast_latent(z, h, w), da_mode)
        else:
            field_ = nets.forward_da(theta_p, images, da_mode)
        out.append(nets.apply_adaptation(field_, seg).data)
    return np.mean(out, axis=0)


def _stack(samples: list[SegSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _case_dice(probs: np.ndarray, labels) -> list[float]:
    masks = to_mask(probs)
    return [dice(m, l) for m, l in zip(masks, labels)]


def _mean_std(values) -> tuple[float, float]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return float(np.mean(v)), float(np.std(v))


@dataclass
class EvalReport:
    method: str
    seed: int
    config_digest: str
    rows: list[dict] = field(default_factory=list)
    per_case: dict[str, list[float]] = field(default_factory=dict)

    CSV_COLUMNS = ("schema_version", "method", "seed", "task", "center", "n_cases", "dice_mean", "dice_std",
                   "config_digest")

    def add(self, task: str, center: str, values: list[float]) -> None:
        if not values:
            raise ValueError(f"{task}/{center}: empty test set")
        m, s = _mean_std(values)
        self.rows.append({"task": task, "center": center, "n_cases": len(values), "dice_mean": m, "dice_std": s})
        self.per_case[f"{task}/{center}"] = list(values)

    def value(self, task: str, center: str = "generic") -> float:
        for r in self.rows:
            if r["task"] == task and r["center"] == center:
                return r["dice_mean"]
        raise KeyError((task, center))

    def task2_mean(self, centers) -> float:
        return float(np.mean([self.value("task2", str(c)) for c in centers]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow([REPORT_SCHEMA_VERSION, self.method, self.seed, r["task"], r["center"], r["n_cases"],
                        f"{r['dice_mean']:.12f}", f"{r['dice_std']:.12f}", self.config_digest])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "method": self.method, "seed": self.seed,
                           "config_digest": self.config_digest, "rows": self.rows, "per_case": self.per_case},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"report schema version {d.get('schema_version')} != {REPORT_SCHEMA_VERSION}")
        return cls(d["method"], d["seed"], d["config_digest"], d["rows"], d["per_case"])


def config_digest(config) -> str:
    from .config import config_to_dict

    blob = json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(method: str, centers, data: FederationData, n_samples: int = 4, latent: str = "sample",
             seed: int = 0, digest: str = "") -> EvalReport:
    """Score trained center states on Task1 (generic) and Task2 (local test sets).

    ``centers`` are objects with ``center_id``, ``theta_s``, ``psi``,
    ``theta_p`` and ``da_mode``, ordered by center id.
    """
    report = EvalReport(method, seed, digest)
    if not data.generic:
        raise ValueError("empty generic test set")
    by_id = {c.spec.center_id: c for c in data.centers}
    g_images = _stack(data.generic)
    g_labels = [s.clean_label for s in data.generic]
    dim = centers[0].psi["mu.w"].shape[1] if centers[0].psi is not None else 1
    g_noise = latent_noise(seed, [s.case_id for s in data.generic], n_samples, dim)

    if method in PERSONALIZED_METHODS:
        pooled = []
        for c in centers:
            pooled += _case_dice(predict_global(c.theta_s, c.psi, g_images, n_samples, g_noise, latent), g_labels)
        report.add("task1", "generic", pooled)
    else:
        c0 = centers[0]
        report.add("task1", "generic",
                   _case_dice(predict_global(c0.theta_s, c0.psi, g_images, n_samples, g_noise, latent), g_labels))

    for c in centers:
        test = by_id[c.center_id].test
        if not test:
            raise ValueError(f"center {c.center_id}: empty local test set")
        noise = latent_noise(seed, [s.case_id for s in test], n_samples, dim)
        probs = predict_local(c.theta_s, c.psi, c.theta_p, c.da_mode, _stack(test), n_samples, noise, latent)
        report.add("task2", str(c.center_id), _case_dice(probs, [s.label for s in test]))
    return report


def round_dice(centers, data: FederationData, config) -> list[tuple[int, float, float]]:
    """Cheap mean-latent Dice per center for training histories."""
    by_id = {c.spec.center_id: c for c in data.centers}
    g_images = _stack(data.generic)
    g_labels = [s.clean_label for s in data.generic]
    out = []
    for c in centers:
        test = by_id[c.center_id].test
        local = predict_local(c.theta_s, c.psi, c.theta_p, c.da_mode, _stack(test), 1, latent="mean")
        generic = predict_global(c.theta_s, c.psi, g_images, 1, latent="mean")
        out.append((c.center_id, _mean_std(_case_dice(local, [s.label for s in test]))[0],
                    _mean_std(_case_dice(generic, g_labels))[0]))
    return out
