"""Reconstruction scoring and identity-leakage probes.

Window scores are sample Pearson correlations with a logged zero
convention for degenerate windows.  The leakage probe fits a small
cross-validated logistic model on summary features, never on raw
samples, so it measures identity information a plain decoder could
actually exploit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .autodiff import Tensor
from .errors import DimensionError, ParameterError
from .network import frozen

logger = logging.getLogger(__name__)

# sums of squares below this are treated as zero variance
_DEGENERATE_SS = 1e-16

_BAND_EDGES_HZ = (0.25, 1.0, 2.0, 4.0, 8.0, 16.0)


def pcc_metric(truth: np.ndarray, pred: np.ndarray) -> float:
    """Sample Pearson correlation of two windows; degenerate windows give 0."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.ndim != 1 or pred.ndim != 1 or truth.shape != pred.shape:
        raise DimensionError(f"pcc_metric: need matching 1-D windows, got "
                             f"{truth.shape} and {pred.shape}")
    if truth.size < 2:
        raise DimensionError("pcc_metric: windows need at least two samples")
    tc = truth - truth.mean()
    pc = pred - pred.mean()
    ss_t = float(tc @ tc)
    ss_p = float(pc @ pc)
    if ss_t < _DEGENERATE_SS or ss_p < _DEGENERATE_SS:
        logger.warning("pcc_metric: degenerate window scored as 0")
        return 0.0
    return float(tc @ pc / np.sqrt(ss_t * ss_p))


def window_pcc(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-window correlations for (N, L) batches, degenerate rows scored 0."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 2 or pred.shape != truth.shape:
        raise DimensionError(f"window_pcc: need matching (N, L), got "
                             f"{pred.shape} and {truth.shape}")
    if pred.shape[1] < 2:
        raise DimensionError("window_pcc: windows need at least two samples")
    pc = pred - pred.mean(-1, keepdims=True)
    tc = truth - truth.mean(-1, keepdims=True)
    ss_p = (pc * pc).sum(-1)
    ss_t = (tc * tc).sum(-1)
    bad = (ss_p < _DEGENERATE_SS) | (ss_t < _DEGENERATE_SS)
    if bad.any():
        logger.warning("window_pcc: %d degenerate windows scored as 0", int(bad.sum()))
    denom = np.sqrt(np.where(bad, 1.0, ss_p * ss_t))
    return np.where(bad, 0.0, (pc * tc).sum(-1) / denom)


def reconstruct_windows(codec, eeg: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched graph-free codec forward over (N, C, L) windows."""
    with frozen(codec):
        parts = [codec.reconstruct(Tensor(eeg[i:i + batch_size])).data
                 for i in range(0, eeg.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


def embed_windows(classifier, eeg: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched graph-free embedding forward over (N, C, L) windows."""
    with frozen(classifier):
        parts = [classifier.embedding(Tensor(eeg[i:i + batch_size])).data
                 for i in range(0, eeg.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# identity-leakage probes
# ---------------------------------------------------------------------------


def envelope_features(envelopes: np.ndarray, sample_rate_hz: float) -> np.ndarray:
    """Summary features per window: mean, log variance, log band powers."""
    env = np.asarray(envelopes, dtype=np.float64)
    if env.ndim != 2:
        raise DimensionError(f"envelope_features: need (N, L), got {env.shape}")
    n, L = env.shape
    centered = env - env.mean(-1, keepdims=True)
    var = centered.var(-1)
    spectrum = np.abs(np.fft.rfft(centered, axis=-1)) ** 2 / L
    freqs = np.fft.rfftfreq(L, d=1.0 / sample_rate_hz)
    bands = []
    for lo, hi in zip(_BAND_EDGES_HZ, _BAND_EDGES_HZ[1:]):
        mask = (freqs >= lo) & (freqs < hi)
        power = spectrum[:, mask].mean(-1) if mask.any() else np.zeros(n)
        bands.append(np.log(power + 1e-12))
    return np.column_stack([env.mean(-1), np.log(var + 1e-12)] + bands)


def eeg_variance_features(eeg: np.ndarray) -> np.ndarray:
    """Log per-channel variance of (N, C, L) windows: (N, C)."""
    eeg = np.asarray(eeg, dtype=np.float64)
    if eeg.ndim != 3:
        raise DimensionError(f"eeg_variance_features: need (N, C, L), got {eeg.shape}")
    return np.log(eeg.var(-1) + 1e-12)


def identity_probe(features: np.ndarray, labels: np.ndarray, *,
                   seed: int = 0, folds: int = 5) -> float:
    """Cross-validated accuracy of a logistic model on summary features.

    Higher accuracy means more identity leakage in whatever produced the
    features.  Requires at least two classes and 20 rows per class so the
    folds stay meaningful.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise DimensionError(f"identity_probe: need (N, F) features and (N,) labels, "
                             f"got {features.shape} and {labels.shape}")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ParameterError("identity_probe: need at least two classes")
    if counts.min() < 20:
        raise ParameterError(
            f"identity_probe: every class needs >= 20 windows, worst has {counts.min()}")
    model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return float(cross_val_score(model, features, labels, cv=cv).mean())


def subject_probe(envelopes: np.ndarray, labels: np.ndarray,
                  sample_rate_hz: float, *, seed: int = 0) -> float:
    """Identity probe on reconstructed (or true) envelope windows."""
    return identity_probe(envelope_features(envelopes, sample_rate_hz),
                          labels, seed=seed)


def probe_feasible(labels: np.ndarray) -> bool:
    classes, counts = np.unique(np.asarray(labels), return_counts=True)
    return len(classes) >= 2 and counts.min() >= 20


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectScore:
    subject_id: int
    mean_pcc: float
    std_pcc: float
    n_windows: int


@dataclass(frozen=True)
class MetricsReport:
    model: str
    split: str                      # "inner" or "cross"
    scores: tuple[SubjectScore, ...]
    probe_accuracy: float           # NaN when the probe was infeasible
    config_hash: str

    def mean_pcc(self) -> float:
        total = sum(s.mean_pcc * s.n_windows for s in self.scores)
        count = sum(s.n_windows for s in self.scores)
        return total / count if count else float("nan")


def fingerprint(mapping: dict) -> str:
    """Short stable hash of a JSON-serializable configuration mapping."""
    blob = json.dumps(mapping, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _check_provenance(dataset) -> None:
    tags = list(zip(dataset.recording_ids, dataset.window_starts.tolist()))
    if len(set(tags)) != len(tags):
        raise ParameterError("evaluate: duplicate window provenance tags; splits are mixed")


def evaluate(codec, dataset, mode: str, *, model: str = "codec",
             config_hash: str = "", probe_seed: int = 0,
             batch_size: int = 64) -> MetricsReport:
    """Score one split: per-subject PCC statistics plus the leakage probe.

    In cross mode the split must contain no training subject; in inner
    mode it must contain only training subjects.  Either violation is a
    split-hygiene failure, not a soft warning.
    """
    if mode not in ("inner", "cross"):
        raise ParameterError(f"evaluate: mode must be inner or cross, got {mode!r}")
    if dataset.n_windows == 0:
        raise ParameterError("evaluate: empty split")
    _check_provenance(dataset)
    here = set(dataset.subjects())
    train = set(dataset.train_subjects)
    if mode == "cross" and here & train:
        raise ParameterError(
            f"evaluate: cross-mode split shares subjects {sorted(here & train)} with training")
    if mode == "inner" and not here <= train:
        raise ParameterError(
            f"evaluate: inner-mode split has unseen subjects {sorted(here - train)}")
    recon = reconstruct_windows(codec, dataset.eeg, batch_size)
    pcc = window_pcc(recon, dataset.envelope)
    scores = []
    for sid in dataset.subjects():
        rows = pcc[dataset.subject_ids == sid]
        scores.append(SubjectScore(subject_id=int(sid),
                                   mean_pcc=float(rows.mean()),
                                   std_pcc=float(rows.std()),
                                   n_windows=int(rows.size)))
    if probe_feasible(dataset.subject_ids):
        probe = subject_probe(recon, dataset.subject_ids,
                              dataset.sample_rate_hz, seed=probe_seed)
    else:
        logger.warning("evaluate: too few windows per subject for the probe")
        probe = float("nan")
    return MetricsReport(model=model, split=mode, scores=tuple(scores),
                         probe_accuracy=probe, config_hash=config_hash)
