"""
Accuracy and separability metrics.

MPJPE per future frame, A-MPJPE over frames, AP-MPJPE across independently
trained runs, AUROC for uncertainty-based selective classification, and the
per-horizon table used for reporting.
"""
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import roc_auc_score, roc_curve

from errors import HorizonError, ShapeMismatchError

DEFAULT_HORIZONS_MS = (80, 160, 320, 400, 560, 720, 880, 1000)
_HORIZON_TOLERANCE  = 1e-6


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(y: np.ndarray, y_hat: np.ndarray) -> None:
    if y.shape != y_hat.shape:
        raise ShapeMismatchError(f"y {y.shape} vs y_hat {y_hat.shape}")
    if y.ndim < 3 or y.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (..., T, J, 3), got {y.shape}")


def mpjpe(y, y_hat) -> np.ndarray:
    """Per-frame mean Euclidean joint error in mm: (T,) or (..., T) for batches."""
    y, y_hat = _as_array(y), _as_array(y_hat)
    _check_pair(y, y_hat)
    return np.linalg.norm(y - y_hat, axis=-1).mean(axis=-1)


def a_mpjpe(y, y_hat) -> float:
    """Mean of mpjpe over frames (and over samples for batched input)."""
    return float(np.mean(mpjpe(y, y_hat)))


def ap_mpjpe(predictions) -> float:
    """
    Average pairwise A-MPJPE between R runs' predictions of the same samples.
    predictions: (R, N, T, J, 3) array or a list of R per-run arrays.
    """
    runs = [_as_array(p) for p in predictions]
    if len(runs) < 2:
        raise ValueError(f"ap_mpjpe needs at least 2 runs, got {len(runs)}")
    shape = runs[0].shape
    if any(r.shape != shape for r in runs):
        raise ShapeMismatchError("all runs must predict the same samples")
    per_pair = [np.mean(mpjpe(runs[r], runs[s])) for r, s in combinations(range(len(runs)), 2)]
    return float(np.mean(per_pair))


def auroc(scores_negative, scores_positive) -> float:
    """
    P(random positive scores above random negative), ties counted 0.5.
    Positives are the class expected to carry higher uncertainty.
    """
    neg = np.asarray(scores_negative, dtype=np.float64).ravel()
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ValueError("auroc needs non-empty negative and positive score lists")
    labels = np.concatenate([np.zeros(neg.size), np.ones(pos.size)])
    return float(roc_auc_score(labels, np.concatenate([neg, pos])))


def roc_points(scores_negative, scores_positive) -> pd.DataFrame:
    """Full ROC curve as a DataFrame with columns threshold, fpr, tpr."""
    neg = np.asarray(scores_negative, dtype=np.float64).ravel()
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    labels = np.concatenate([np.zeros(neg.size), np.ones(pos.size)])
    fpr, tpr, thresholds = roc_curve(labels, np.concatenate([neg, pos]), drop_intermediate=False)
    return pd.DataFrame({"threshold": thresholds, "fpr": fpr, "tpr": tpr})


# ---------------------------------------------------------------------------
# Horizon table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HorizonTable:
    horizons_ms: tuple
    mpjpe_mm: tuple
    num_samples: int

    def __post_init__(self):
        if len(self.horizons_ms) != len(self.mpjpe_mm):
            raise ValueError("horizons_ms and mpjpe_mm must have equal length")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"horizon_ms": list(self.horizons_ms), "mpjpe_mm": list(self.mpjpe_mm)})


def horizon_frame_index(horizon_ms: float, fps: float, T: int | None = None) -> int:
    """1-based future frame for a horizon: round(h * fps / 1000). 80 ms at 25 fps -> 2."""
    exact = horizon_ms * fps / 1000.0
    index = int(round(exact))
    if abs(exact - index) > _HORIZON_TOLERANCE or index < 1:
        raise HorizonError(f"{horizon_ms} ms is not a multiple of the {1000.0 / fps:g} ms frame period")
    if T is not None and index > T:
        raise HorizonError(f"{horizon_ms} ms maps to frame {index}, beyond the T={T} forecast frames")
    return index


def horizon_table_from_arrays(future, predictions, horizons_ms, fps: float) -> HorizonTable:
    """future/predictions: (N, T, J, 3). MPJPE averaged over all windows at each horizon frame."""
    per_frame = mpjpe(future, predictions)          # (N, T)
    if per_frame.ndim == 1:
        per_frame = per_frame[None, :]
    T = per_frame.shape[-1]
    values = []
    for h in horizons_ms:
        index = horizon_frame_index(h, fps, T)
        values.append(float(per_frame[:, index - 1].mean()))
    return HorizonTable(tuple(horizons_ms), tuple(values), int(per_frame.shape[0]))


def horizon_table(samples, forecaster, horizons_ms=DEFAULT_HORIZONS_MS, fps: float = 25.0) -> HorizonTable:
    """
    samples: list of ForecastSample; forecaster: callable observed (N,O,J,3) -> (N,T,J,3).
    Averages over windows, not over families.
    """
    observed = np.stack([s.observed for s in samples])
    future   = np.stack([s.future for s in samples])
    predictions = _as_array(forecaster(observed))
    return horizon_table_from_arrays(future, predictions, horizons_ms, fps)


def gain_table(baseline: HorizonTable, candidate: HorizonTable) -> pd.DataFrame:
    """Relative improvement per horizon: (baseline - candidate) / baseline in percent."""
    if tuple(baseline.horizons_ms) != tuple(candidate.horizons_ms):
        raise ValueError("gain_table: horizon grids differ")
    base = np.asarray(baseline.mpjpe_mm, dtype=np.float64)
    cand = np.asarray(candidate.mpjpe_mm, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(base > 0, (base - cand) / base * 100.0, 0.0)
    return pd.DataFrame({
        "horizon_ms":   list(baseline.horizons_ms),
        "baseline_mm":  base,
        "candidate_mm": cand,
        "gain_pct":     gain,
    })
