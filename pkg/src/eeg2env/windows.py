"""Windowing, split assignment, normalization, and the on-disk recording cache.

Splits are temporal: validation and test segments come from the middle
of each recording so that train windows never straddle them.  In cross
mode, whole subjects are held out instead.  Normalization statistics are
computed on train windows only and applied everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ParameterError
from .signals import EegRecording, EnvelopeSignal, highpass_zero_phase

_HEADER_NAME = "header.json"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class WindowConfig:
    window_s: float = 5.0
    hop_s: float = 1.0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    mode: str = "inner"
    highpass_hz: float | None = 0.5

    def __post_init__(self):
        if self.window_s <= 0 or self.hop_s <= 0:
            raise ParameterError("WindowConfig: window and hop must be positive")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ParameterError("WindowConfig: need three positive split ratios")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ParameterError(f"WindowConfig: ratios must sum to 1, got {self.ratios}")
        if self.mode not in ("inner", "cross"):
            raise ParameterError(f"WindowConfig: mode must be 'inner' or 'cross', got {self.mode!r}")


@dataclass
class NormStats:
    eeg_mean: np.ndarray  # (C,)
    eeg_std: np.ndarray   # (C,)
    env_mean: float
    env_std: float


@dataclass
class WindowedDataset:
    """One split's windows, already standardized with train statistics."""

    eeg: np.ndarray            # (N, C, L)
    envelope: np.ndarray       # (N, L)
    subject_ids: np.ndarray    # (N,) int
    recording_ids: list[str]   # per window
    window_starts: np.ndarray  # (N,) sample offset within the recording
    split: str
    sample_rate_hz: float
    stats: NormStats
    train_subjects: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_windows(self) -> int:
        return self.eeg.shape[0]

    @property
    def window_len(self) -> int:
        return self.eeg.shape[2]

    def subjects(self) -> tuple[int, ...]:
        return tuple(sorted(set(int(s) for s in self.subject_ids)))


def _cut(seg_lo: int, seg_hi: int, L: int, hop: int) -> list[int]:
    return list(range(seg_lo, seg_hi - L + 1, hop))


def _segments(T: int, cfg: WindowConfig, cross_train_subject: bool):
    """Per-recording temporal segments as {split: [(lo, hi), ...]}."""
    r_train, r_val, r_test = cfg.ratios
    if cross_train_subject:
        # held-out subjects absorb the test ratio; train subjects keep
        # a validation slice carved from the middle
        n_val = int(round(T * r_val / (r_train + r_val)))
        a = (T - n_val) // 2
        return {"train": [(0, a), (a + n_val, T)], "val": [(a, a + n_val)], "test": []}
    n_val = int(round(T * r_val))
    n_test = int(round(T * r_test))
    a = (T - n_val - n_test) // 2
    return {"train": [(0, a), (a + n_val + n_test, T)],
            "val": [(a, a + n_val)],
            "test": [(a + n_val, a + n_val + n_test)]}


def window_and_split(pairs: list[tuple[EegRecording, EnvelopeSignal]],
                     cfg: WindowConfig) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Cut aligned windows, assign splits, standardize with train stats."""
    if not pairs:
        raise ParameterError("window_and_split: no recordings")
    fs = pairs[0][0].sample_rate_hz
    subjects = sorted(set(rec.subject_id for rec, _ in pairs))
    if cfg.mode == "cross" and len(subjects) < 2:
        raise ParameterError("window_and_split: cross mode needs at least 2 subjects")

    held_out: set[int] = set()
    if cfg.mode == "cross":
        k = max(1, int(round(cfg.ratios[2] * len(subjects))))
        if k >= len(subjects):
            raise ParameterError("window_and_split: test ratio holds out every subject")
        held_out = set(subjects[-k:])

    L = int(round(cfg.window_s * fs))
    hop = int(round(cfg.hop_s * fs))
    buckets = {name: {"eeg": [], "env": [], "sid": [], "rid": [], "start": []}
               for name in ("train", "val", "test")}

    for rec, env in pairs:
        if rec.sample_rate_hz != fs or env.sample_rate_hz != fs:
            raise ParameterError("window_and_split: recordings disagree on sample rate")
        X = np.asarray(rec.samples, dtype=np.float64)
        e = np.asarray(env.samples, dtype=np.float64)
        if X.shape[1] != e.shape[0]:
            raise ParameterError(
                f"window_and_split: {rec.recording_id} has {X.shape[1]} EEG samples "
                f"but {e.shape[0]} envelope samples")
        if cfg.highpass_hz is not None:
            X = highpass_zero_phase(X, fs, cfg.highpass_hz)
        T = X.shape[1]
        if rec.subject_id in held_out:
            segs = {"train": [], "val": [], "test": [(0, T)]}
        else:
            segs = _segments(T, cfg, cross_train_subject=cfg.mode == "cross")
        for split, spans in segs.items():
            bucket = buckets[split]
            for lo, hi in spans:
                for start in _cut(lo, hi, L, hop):
                    bucket["eeg"].append(X[:, start:start + L])
                    bucket["env"].append(e[start:start + L])
                    bucket["sid"].append(rec.subject_id)
                    bucket["rid"].append(rec.recording_id)
                    bucket["start"].append(start)

    if not buckets["train"]["eeg"]:
        raise ParameterError("window_and_split: train split came out empty; "
                             "recordings are too short for this window length")

    train_eeg = np.stack(buckets["train"]["eeg"])
    eeg_mean = train_eeg.mean(axis=(0, 2))
    eeg_std = train_eeg.std(axis=(0, 2))
    train_env = np.stack(buckets["train"]["env"])
    env_mean = float(train_env.mean())
    env_std = float(train_env.std())
    if np.any(eeg_std < 1e-12) or env_std < 1e-12:
        raise ParameterError("window_and_split: a channel is constant on the train split")
    stats = NormStats(eeg_mean, eeg_std, env_mean, env_std)
    train_subjects = tuple(s for s in subjects if s not in held_out)

    out = []
    for split in ("train", "val", "test"):
        b = buckets[split]
        if b["eeg"]:
            eeg = (np.stack(b["eeg"]) - eeg_mean[None, :, None]) / eeg_std[None, :, None]
            envs = (np.stack(b["env"]) - env_mean) / env_std
        else:
            eeg = np.zeros((0, train_eeg.shape[1], L))
            envs = np.zeros((0, L))
        out.append(WindowedDataset(
            eeg=eeg, envelope=envs,
            subject_ids=np.asarray(b["sid"], dtype=np.int64),
            recording_ids=list(b["rid"]),
            window_starts=np.asarray(b["start"], dtype=np.int64),
            split=split, sample_rate_hz=fs, stats=stats,
            train_subjects=train_subjects))
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# on-disk recording cache
# ---------------------------------------------------------------------------


def save_recording(directory: str | Path, rec: EegRecording, env: EnvelopeSignal) -> None:
    """Write one recording: a JSON header plus raw little-endian float64."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": _FORMAT_VERSION,
        "kind": "recording",
        "subject_id": int(rec.subject_id),
        "recording_id": rec.recording_id,
        "channels": int(rec.samples.shape[0]),
        "n_samples": int(rec.samples.shape[1]),
        "sample_rate_hz": float(rec.sample_rate_hz),
        "envelope_samples": int(env.samples.shape[0]),
        "envelope_rate_hz": float(env.sample_rate_hz),
    }
    (d / _HEADER_NAME).write_text(json.dumps(header, indent=2, sort_keys=True))
    rec.samples.astype("<f8").tofile(d / "eeg.f64")
    env.samples.astype("<f8").tofile(d / "envelope.f64")


def _read_header(directory: Path) -> dict:
    path = directory / _HEADER_NAME
    if not path.is_file():
        raise CheckpointError(f"no recording header at {path}")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"corrupt recording header at {path}: {err}") from err
    if header.get("kind") != "recording" or header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(f"{path} is not a version-{_FORMAT_VERSION} recording header")
    required = {"subject_id", "recording_id", "channels", "n_samples",
                "sample_rate_hz", "envelope_samples", "envelope_rate_hz"}
    missing = required - set(header)
    if missing:
        raise CheckpointError(f"recording header {path} missing keys {sorted(missing)}")
    return header


def load_recording(directory: str | Path) -> tuple[EegRecording, EnvelopeSignal]:
    d = Path(directory)
    header = _read_header(d)
    eeg = np.fromfile(d / "eeg.f64", dtype="<f8")
    env = np.fromfile(d / "envelope.f64", dtype="<f8")
    expect = header["channels"] * header["n_samples"]
    if eeg.size != expect or env.size != header["envelope_samples"]:
        raise CheckpointError(
            f"recording payload in {d} does not match its header "
            f"(eeg {eeg.size} vs {expect}, envelope {env.size} vs {header['envelope_samples']})")
    rec = EegRecording(samples=eeg.reshape(header["channels"], header["n_samples"]),
                       sample_rate_hz=float(header["sample_rate_hz"]),
                       subject_id=int(header["subject_id"]),
                       recording_id=str(header["recording_id"]))
    return rec, EnvelopeSignal(env, float(header["envelope_rate_hz"]))


def validate_external_recording(directory: str | Path) -> dict:
    """Shape-check an externally preprocessed recording directory.

    This is deliberately a stub: it verifies the header and payload sizes
    are mutually consistent and returns the header, nothing more.
    """
    d = Path(directory)
    header = _read_header(d)
    for name, count in (("eeg.f64", header["channels"] * header["n_samples"]),
                        ("envelope.f64", header["envelope_samples"])):
        path = d / name
        if not path.is_file():
            raise CheckpointError(f"external recording {d} is missing {name}")
        actual = path.stat().st_size
        if actual != count * 8:
            raise CheckpointError(
                f"external recording {d}: {name} holds {actual} bytes, header implies {count * 8}")
    return header
