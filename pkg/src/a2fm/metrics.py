"""Fooling rate, average absolute perturbation, feature distance, coherence."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .attacks import AttackOutcome
from .models import Model, features_at


class MetricError(ValueError):
    pass


@dataclass
class EvalBatch:
    outcomes: list[AttackOutcome]

    @property
    def eligible(self) -> list[AttackOutcome]:
        return [o for o in self.outcomes if not o.skipped]

    @property
    def eligible_count(self) -> int:
        return len(self.eligible)

    @property
    def success_count(self) -> int:
        return sum(o.success for o in self.outcomes)


@dataclass
class MetricReport:
    FR: float
    AAP: float
    DIFF: float = math.nan
    coherence: float = math.nan
    eligible: int = 0
    iters_mean: float = math.nan


def fooling_rate(batch: EvalBatch | list[AttackOutcome]) -> float:
    """Percent of eligible outcomes that succeeded; skipped ones do not count."""
    if not isinstance(batch, EvalBatch):
        batch = EvalBatch(list(batch))
    n = batch.eligible_count
    if n == 0:
        raise MetricError("fooling rate needs at least one eligible video")
    return 100.0 * batch.success_count / n


def rate(successes: int, eligible: int) -> float:
    if eligible < 1:
        raise MetricError("fooling rate needs at least one eligible video")
    if not 0 <= successes <= eligible:
        raise MetricError(f"{successes} successes out of {eligible} eligible")
    return 100.0 * successes / eligible


def aap(perturbations, S: int) -> float:
    """``(1 / (N * S)) * sum_n sum|E_n| / frames_n``.

    Each ``E_n`` is ``(frames, W, H, C)``; channel magnitudes are summed while
    ``S`` counts spatial pixels only.
    """
    perturbations = list(perturbations)
    if not perturbations:
        raise MetricError("AAP needs at least one perturbation")
    if S < 1:
        raise MetricError("spatial size must be positive")
    total = 0.0
    for E in perturbations:
        E = np.asarray(E, dtype=np.float64)
        if E.shape[0] < 1:
            raise MetricError("perturbation with no frames")
        total += np.abs(E).sum() / E.shape[0]
    return float(total / (len(perturbations) * S))


def outcome_aap(outcomes: list[AttackOutcome]) -> float:
    """AAP over the eligible outcomes of one attack run."""
    el = [o for o in outcomes if not o.skipped]
    if not el:
        raise MetricError("AAP needs at least one eligible outcome")
    W, H = el[0].E.shape[1:3]
    return aap([o.E for o in el], W * H)


def feature_diff(model: Model, adv_frames: np.ndarray, ref_frames: np.ndarray, layer: int) -> float:
    """Euclidean distance between the layer-``layer`` features of two frame sets."""
    if adv_frames.shape != ref_frames.shape:
        raise MetricError(f"frame sets differ in shape: {adv_frames.shape} vs {ref_frames.shape}")
    a = features_at(model, adv_frames, layer)
    b = features_at(model, ref_frames, layer)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def clean_frame_distance(model: Model, clips, n_frames: int, layer: int, pairs: int = 32, seed: int = 0) -> float:
    """Mean feature distance between runs of clean frames from different clips.

    This is the benchmark level a feature-similar card should approach.
    """
    if len(clips) < 2:
        raise MetricError("need at least two clips")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(pairs):
        i, j = rng.choice(len(clips), size=2, replace=False)
        si = int(rng.integers(0, clips[i].length - n_frames + 1))
        sj = int(rng.integers(0, clips[j].length - n_frames + 1))
        out.append(feature_diff(model, clips[i].frames[si : si + n_frames], clips[j].frames[sj : sj + n_frames], layer))
    return float(np.mean(out))


def direction_coherence(gradients) -> float:
    """Mean pairwise cosine similarity of flattened gradients."""
    flat = [np.asarray(g, dtype=np.float64).ravel() for g in gradients]
    if len(flat) < 2:
        raise MetricError("coherence needs at least two gradients")
    if len({f.size for f in flat}) != 1:
        raise MetricError("gradients must share one support")
    norms = [np.linalg.norm(f) for f in flat]
    if min(norms) == 0.0:
        raise MetricError("zero-norm gradient")
    unit = [f / n for f, n in zip(flat, norms)]
    cos = [float(np.clip(a @ b, -1.0, 1.0)) for a, b in itertools.combinations(unit, 2)]
    return float(np.mean(cos))


def report(outcomes: list[AttackOutcome], diff: float = math.nan, coherence: float = math.nan) -> MetricReport:
    batch = EvalBatch(outcomes)
    el = batch.eligible
    return MetricReport(
        FR=fooling_rate(batch),
        AAP=outcome_aap(outcomes),
        DIFF=diff,
        coherence=coherence,
        eligible=len(el),
        iters_mean=float(np.mean([o.iterations for o in el])),
    )
