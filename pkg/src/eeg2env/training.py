"""Three-phase training: pretrain the subject classifier, freeze it as the
embedding extractor, then alternate estimator refits with codec updates.

Everything an epoch emits is a pure function of (seed, config, data):
initialization, batch order, and estimator sampling draw from separate
seeded streams, so a penalty weight of zero leaves the codec trajectory
bit-for-bit identical to training without the estimator at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .classifier import ClassifierConfig, SubjectClassifier
from .codec import CodecConfig, EnvelopeCodec, pearson_loss
from .errors import CheckpointError, ParameterError, TrainingAbort
from .evaluation import (embed_windows, probe_feasible, reconstruct_windows,
                         subject_probe, window_pcc)
from .mi import MiConfig, MiEstimator, envelope_summary, total_loss
from .network import frozen
from .optim import Adam, clip_gradients
from .windows import WindowedDataset

METRICS_HEADER = "epoch,phase,l_corr,l_var,val_pcc,probe_acc"


@dataclass(frozen=True)
class TrainConfig:
    classifier_lr: float = 1e-4
    codec_lr: float = 1e-3
    estimator_lr: float = 1e-3
    batch_size: int = 32
    pretrain_epochs: int = 50
    joint_epochs: int = 100
    codec_steps_per_cycle: int = 5      # reconstructor steps per estimator refit
    estimator_steps_per_cycle: int = 5  # refit length; 0 leaves the estimator untrained
    lam: float = 0.1
    grad_clip: float = 5.0
    patience: int = 10
    summary_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("classifier_lr", "codec_lr", "estimator_lr", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"TrainConfig: {name} must be positive")
        for name in ("batch_size", "pretrain_epochs", "joint_epochs",
                     "codec_steps_per_cycle", "patience", "summary_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"TrainConfig: {name} must be at least 1")
        if self.batch_size < 2:
            raise ParameterError("TrainConfig: batch_size must be at least 2")
        if self.estimator_steps_per_cycle < 0:
            raise ParameterError("TrainConfig: estimator_steps_per_cycle must be >= 0")
        if self.lam < 0:
            raise ParameterError(f"TrainConfig: lambda must be nonnegative, got {self.lam}")


def _fmt(x: float) -> str:
    return repr(float(x))


class MetricsLog:
    """Append-only per-epoch CSV; byte-stable for identical runs."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(METRICS_HEADER + "\n")

    def append(self, epoch: int, phase: str, l_corr: float, l_var: float,
               val_pcc: float, probe_acc: float) -> None:
        row = {"epoch": int(epoch), "phase": phase, "l_corr": float(l_corr),
               "l_var": float(l_var), "val_pcc": float(val_pcc),
               "probe_acc": float(probe_acc)}
        self.rows.append(row)
        if self.path is not None:
            line = (f"{row['epoch']},{phase},{_fmt(l_corr)},{_fmt(l_var)},"
                    f"{_fmt(val_pcc)},{_fmt(probe_acc)}\n")
            with open(self.path, "a") as fh:
                fh.write(line)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks = chunks[:-1]  # a lone window cannot form a contrastive pair
    return chunks


def _require_finite(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value).all():
        raise TrainingAbort(f"non-finite {what}; stopping before corrupting parameters")


def classification_accuracy(classifier: SubjectClassifier, eeg: np.ndarray,
                            labels: np.ndarray, batch_size: int = 64) -> float:
    with frozen(classifier):
        parts = [classifier.logits(Tensor(eeg[i:i + batch_size])).data.argmax(-1)
                 for i in range(0, eeg.shape[0], batch_size)]
    return float((np.concatenate(parts) == labels).mean())


def _class_labels(dataset: WindowedDataset, class_of: dict[int, int]) -> np.ndarray:
    unknown = set(dataset.subjects()) - set(class_of)
    if unknown:
        raise ParameterError(f"dataset holds subjects {sorted(unknown)} the "
                             f"classifier was never trained on")
    return np.array([class_of[int(s)] for s in dataset.subject_ids], dtype=np.int64)


@dataclass
class PretrainResult:
    classifier: SubjectClassifier
    class_of: dict[int, int]        # subject id -> head index
    history: list[dict]
    best_val_accuracy: float
    epochs_run: int


def pretrain_classifier(train: WindowedDataset, val: WindowedDataset,
                        cfg: TrainConfig, *, arch: ClassifierConfig | None = None,
                        metrics: MetricsLog | None = None) -> PretrainResult:
    """Supervised subject classification; retains the best-validation weights."""
    subjects = train.subjects()
    if len(subjects) < 2:
        raise ParameterError("pretrain_classifier: need at least two training subjects")
    if val.n_windows == 0:
        raise ParameterError("pretrain_classifier: validation split is empty; "
                             "lengthen the recordings or rebalance the split ratios")
    class_of = {int(s): i for i, s in enumerate(subjects)}
    if arch is None:
        arch = ClassifierConfig(n_subjects=len(subjects), channels=train.eeg.shape[1])
    if arch.n_subjects != len(subjects):
        raise ParameterError(f"pretrain_classifier: head has {arch.n_subjects} classes "
                             f"but the data has {len(subjects)} subjects")
    labels_train = _class_labels(train, class_of)
    labels_val = _class_labels(val, class_of)
    metrics = metrics or MetricsLog()

    init_rng, order_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(cfg.seed).spawn(2))
    classifier = SubjectClassifier(arch, init_rng)
    adam = Adam(classifier.parameters(), cfg.classifier_lr)

    best_acc, best_arrays, since_best, epochs_run = -1.0, None, 0, 0
    history: list[dict] = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        for idx in _batches(train.n_windows, cfg.batch_size, order_rng):
            ad.zero_grads(classifier.parameters().values())
            loss = ad.cross_entropy_logits(classifier.logits(Tensor(train.eeg[idx])),
                                           labels_train[idx])
            _require_finite(loss.data, "pretraining loss")
            ad.backward(loss)
            clip_gradients(classifier.parameters(), cfg.grad_clip)
            adam.step()
            losses.append(loss.item())
        acc = classification_accuracy(classifier, val.eeg, labels_val)
        epochs_run = epoch
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_accuracy": acc})
        metrics.append(epoch, "pretrain", float(np.mean(losses)), 0.0, 0.0, acc)
        if acc > best_acc:
            best_acc, best_arrays, since_best = acc, classifier.export_arrays(), 0
        else:
            since_best += 1
        if acc >= 0.999 or since_best >= cfg.patience:
            break
    classifier.load_arrays(best_arrays)
    return PretrainResult(classifier=classifier, class_of=class_of, history=history,
                          best_val_accuracy=best_acc, epochs_run=epochs_run)


@dataclass
class JointResult:
    codec: EnvelopeCodec
    estimator: MiEstimator
    history: list[dict]
    best_val_pcc: float
    epochs_run: int
    codec_steps: int
    estimator_steps: int


def _save_train_state(out_dir: Path, codec, estimator, adam_codec, adam_est,
                      meta: dict, best_arrays: dict | None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, net in (("param.codec.", codec), ("param.est.", estimator)):
        for k, v in net.export_arrays().items():
            arrays[prefix + k] = v
    for prefix, adam in (("adam.codec.", adam_codec), ("adam.est.", adam_est)):
        state = adam.export_state()
        for k, v in state["m"].items():
            arrays[prefix + "m." + k] = v
        for k, v in state["v"].items():
            arrays[prefix + "v." + k] = v
    if best_arrays is not None:
        for k, v in best_arrays.items():
            arrays["best.codec." + k] = v
    ckpt.save_archive(out_dir / "train_state", "train-state", arrays, meta)


def _split_prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def train_joint(train: WindowedDataset, val: WindowedDataset,
                classifier: SubjectClassifier, cfg: TrainConfig, *,
                codec_arch: CodecConfig | None = None,
                metrics: MetricsLog | None = None,
                out_dir: str | Path | None = None,
                resume_from: str | Path | None = None) -> JointResult:
    """Alternating optimization against a frozen embedding extractor.

    Each cycle refits the estimator for estimator_steps_per_cycle steps on
    the codec's current outputs, then runs codec_steps_per_cycle codec
    updates on the penalized correlation loss.  The classifier is frozen
    throughout and is verified unchanged at the end.
    """
    if train.n_windows < 2:
        raise ParameterError("train_joint: need at least two training windows")
    if val.n_windows == 0:
        raise ParameterError("train_joint: validation split is empty; "
                             "lengthen the recordings or rebalance the split ratios")
    if codec_arch is None:
        codec_arch = CodecConfig(in_channels=train.eeg.shape[1])
    window_len = train.window_len
    if window_len % codec_arch.total_pool:
        raise ParameterError(f"train_joint: window length {window_len} not divisible "
                             f"by the codec's total pooling {codec_arch.total_pool}")
    if window_len % cfg.summary_dim:
        raise ParameterError(f"train_joint: window length {window_len} does not "
                             f"split into {cfg.summary_dim} summary bins")

    classifier.set_trainable(False)
    classifier_checksum = classifier.checksum()
    metrics = metrics or MetricsLog()
    out_path = Path(out_dir) if out_dir is not None else None

    codec_rng, est_rng, order_rng, est_order_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    codec = EnvelopeCodec(codec_arch, codec_rng)
    estimator = MiEstimator(
        MiConfig(envelope_dim=cfg.summary_dim,
                 embedding_dim=2 * classifier.cfg.fused_channels), est_rng)
    adam_codec = Adam(codec.parameters(), cfg.codec_lr)
    adam_est = Adam(estimator.parameters(), cfg.estimator_lr)

    # frozen targets never change during the joint phase: compute them once
    z_s = embed_windows(classifier, train.eeg)

    start_epoch, codec_steps, est_steps = 0, 0, 0
    best_pcc, best_arrays, since_best = -np.inf, None, 0
    history: list[dict] = []

    if resume_from is not None:
        _, arrays, meta = ckpt.load_archive(resume_from, expect_kind="train-state")
        if meta.get("classifier_checksum") != classifier_checksum:
            raise CheckpointError("train state was produced with a different classifier")
        for key, value in (("lam", cfg.lam), ("seed", cfg.seed),
                           ("batch_size", cfg.batch_size)):
            if meta.get(key) != value:
                raise CheckpointError(f"train state {key}={meta.get(key)!r} conflicts "
                                      f"with config {key}={value!r}")
        codec.load_arrays(_split_prefixed(arrays, "param.codec."))
        estimator.load_arrays(_split_prefixed(arrays, "param.est."))
        for prefix, adam in (("adam.codec.", adam_codec), ("adam.est.", adam_est)):
            adam.load_state({"t": meta[prefix + "t"],
                             "m": _split_prefixed(arrays, prefix + "m."),
                             "v": _split_prefixed(arrays, prefix + "v.")})
        best = _split_prefixed(arrays, "best.codec.")
        best_arrays = best or None
        start_epoch = int(meta["epoch"])
        codec_steps = int(meta["codec_steps"])
        est_steps = int(meta["est_steps"])
        best_pcc = float(meta["best_pcc"])
        since_best = int(meta["since_best"])
        order_rng.bit_generator.state = meta["order_rng_state"]
        est_order_rng.bit_generator.state = meta["est_order_rng_state"]

    k = cfg.codec_steps_per_cycle
    epochs_run = start_epoch
    for epoch in range(start_epoch + 1, cfg.joint_epochs + 1):
        corr_sum, var_sum, n_steps = 0.0, 0.0, 0
        for idx in _batches(train.n_windows, cfg.batch_size, order_rng):
            if codec_steps % k == 0 and cfg.estimator_steps_per_cycle > 0:
                estimator.set_trainable(True)
                for _ in range(cfg.estimator_steps_per_cycle):
                    pick = est_order_rng.choice(train.n_windows,
                                                size=min(cfg.batch_size, train.n_windows),
                                                replace=False)
                    recon = reconstruct_windows(codec, train.eeg[pick],
                                                batch_size=len(pick))
                    z_e = envelope_summary(Tensor(recon), cfg.summary_dim)
                    ad.zero_grads(estimator.parameters().values())
                    fit = estimator.fit_loss(z_e, Tensor(z_s[pick]))
                    _require_finite(fit.data, "estimator loss")
                    ad.backward(fit)
                    clip_gradients(estimator.parameters(), cfg.grad_clip)
                    adam_est.step()
                    est_steps += 1
            estimator.set_trainable(False)
            recon = codec.reconstruct(Tensor(train.eeg[idx]))
            l_corr = pearson_loss(recon, Tensor(train.envelope[idx]))
            l_var = estimator.mi_bound(envelope_summary(recon, cfg.summary_dim),
                                       Tensor(z_s[idx]))
            loss = total_loss(l_corr, l_var, cfg.lam)
            _require_finite(loss.data, "joint loss")
            ad.zero_grads(codec.parameters().values())
            ad.backward(loss)
            clip_gradients(codec.parameters(), cfg.grad_clip)
            adam_codec.step()
            codec_steps += 1
            corr_sum += l_corr.item()
            var_sum += l_var.item()
            n_steps += 1

        val_recon = reconstruct_windows(codec, val.eeg)
        val_pcc = float(window_pcc(val_recon, val.envelope).mean())
        if probe_feasible(val.subject_ids):
            probe = subject_probe(val_recon, val.subject_ids, val.sample_rate_hz,
                                  seed=cfg.seed)
        else:
            probe = float("nan")
        epochs_run = epoch
        history.append({"epoch": epoch, "l_corr": corr_sum / n_steps,
                        "l_var": var_sum / n_steps, "val_pcc": val_pcc,
                        "probe_acc": probe})
        metrics.append(epoch, "joint", corr_sum / n_steps, var_sum / n_steps,
                       val_pcc, probe)
        if val_pcc > best_pcc:
            best_pcc, best_arrays, since_best = val_pcc, codec.export_arrays(), 0
        else:
            since_best += 1

        if out_path is not None:
            meta = {"epoch": epoch, "codec_steps": codec_steps, "est_steps": est_steps,
                    "best_pcc": best_pcc, "since_best": since_best,
                    "lam": cfg.lam, "seed": cfg.seed, "batch_size": cfg.batch_size,
                    "classifier_checksum": classifier_checksum,
                    "adam.codec.t": adam_codec.t, "adam.est.t": adam_est.t,
                    "order_rng_state": order_rng.bit_generator.state,
                    "est_order_rng_state": est_order_rng.bit_generator.state}
            _save_train_state(out_path, codec, estimator, adam_codec, adam_est,
                              meta, best_arrays)
        if since_best >= cfg.patience:
            break

    if best_arrays is not None:
        codec.load_arrays(best_arrays)
    if classifier.checksum() != classifier_checksum:
        raise TrainingAbort("frozen classifier changed during the joint phase")
    return JointResult(codec=codec, estimator=estimator, history=history,
                       best_val_pcc=best_pcc, epochs_run=epochs_run,
                       codec_steps=codec_steps, estimator_steps=est_steps)
