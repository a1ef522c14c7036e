"""Command-line pipeline: synth -> pretrain-classifier -> train-codec ->
evaluate -> report, plus gradcheck and mi-bench diagnostics.

Configuration lives in a plain key = value file with section-dotted keys
(synth.n_subjects, window.mode, train.lam, ...).  Every key is mirrored
by a flag of the same name, and flags override the file.  Exit codes:
0 all checks passed, 1 a checked invariant failed, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .checkpoint import load_archive, load_network, save_network
from .classifier import ClassifierConfig, SubjectClassifier
from .codec import CodecConfig, EnvelopeCodec, pearson_loss
from .errors import (CheckpointError, DimensionError, ParameterError,
                     TrainingAbort)
from .evaluation import MetricsReport, SubjectScore, evaluate, fingerprint
from .mi import MiConfig, MiEstimator
from .optim import Adam
from .report import report_emit
from .signals import SynthConfig, ridge_envelope_score, synth_generate
from .training import (MetricsLog, TrainConfig, pretrain_classifier, train_joint)
from .windows import WindowConfig, load_recording, save_recording, window_and_split

_SECTIONS = {"synth": SynthConfig, "window": WindowConfig, "train": TrainConfig}


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def _coerce(default, text: str):
    """Parse text into the type of a field's default value."""
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        return float(text)
    if isinstance(default, tuple):
        elem = type(default[0])
        return tuple(elem(part) for part in text.split(",") if part.strip())
    return text


def read_config_file(path: str | Path) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def build_configs(text_map: dict[str, str]) -> dict:
    """Turn section-dotted key/value strings into config dataclasses."""
    fields = {section: {f.name: f for f in dataclasses.fields(cls)}
              for section, cls in _SECTIONS.items()}
    values: dict[str, dict] = {section: {} for section in _SECTIONS}
    for key, text in text_map.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in fields[section]:
            known = ", ".join(f"{s}.{n}" for s in fields for n in fields[s])
            raise ParameterError(f"unknown config key {key!r}; known keys: {known}")
        default = getattr(_SECTIONS[section](), name)
        values[section][name] = _coerce(default, text)
    return {section: cls(**values[section]) for section, cls in _SECTIONS.items()}


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (section.key value)")
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            group.add_argument(f"--{section}.{f.name}", dest=f"ov::{section}.{f.name}",
                               metavar="V", help=argparse.SUPPRESS)


def resolve_configs(args: argparse.Namespace) -> dict:
    text_map: dict[str, str] = {}
    if getattr(args, "config", None):
        text_map.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if key.startswith("ov::") and value is not None:
            text_map[key[4:]] = value
    # convenience flags are shorthand for the dotted keys
    if getattr(args, "seed", None) is not None:
        text_map["synth.seed"] = str(args.seed)
        text_map["train.seed"] = str(args.seed)
    if getattr(args, "lam", None) is not None:
        text_map["train.lam"] = str(args.lam)
    if getattr(args, "mode", None) is not None:
        text_map["window.mode"] = args.mode
    return build_configs(text_map)


def config_hash(cfgs: dict) -> str:
    return fingerprint({section: dataclasses.asdict(cfg)
                        for section, cfg in sorted(cfgs.items())})


def data_hash(cfgs: dict) -> str:
    """Hash of the cohort-defining sections only.

    Checkpoint compatibility keys on this, so one cohort supports a
    lambda sweep or a longer resumed run without retraining upstream
    stages; the full config_hash still stamps every artifact.
    """
    return fingerprint({section: dataclasses.asdict(cfgs[section])
                        for section in ("synth", "window")})


# ---------------------------------------------------------------------------
# shared data plumbing
# ---------------------------------------------------------------------------


def _recordings(cfgs: dict, out: Path):
    """Load the synth cache under out/recordings, or generate in memory."""
    scfg = cfgs["synth"]
    root = out / "recordings"
    if root.is_dir():
        dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if dirs:
            pairs = [load_recording(d) for d in dirs]
            want = scfg.n_subjects * scfg.recordings_per_subject
            if (len(pairs) != want
                    or any(rec.samples.shape[0] != scfg.channels for rec, _ in pairs)):
                raise ParameterError(
                    f"{root} holds a cohort that does not match the current synth "
                    f"config; delete it or point --out at a fresh run directory")
            return pairs
    return synth_generate(scfg)


def _datasets(cfgs: dict, out: Path):
    return window_and_split(_recordings(cfgs, out), cfgs["window"])


def _print_report(report: MetricsReport) -> None:
    print(f"model={report.model} split={report.split} "
          f"mean_pcc={report.mean_pcc():.4f} probe_acc={report.probe_accuracy:.4f}")
    for s in report.scores:
        print(f"  subject {s.subject_id:3d}: pcc {s.mean_pcc:+.4f} "
              f"(std {s.std_pcc:.4f}, n={s.n_windows})")


def _check(label: str, ok: bool, detail: str = "") -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}" + (f" ({detail})" if detail else ""))
    return ok


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    cfgs = resolve_configs(args)
    out = Path(args.out)
    pairs = synth_generate(cfgs["synth"])
    for rec, env in pairs:
        save_recording(out / "recordings" / rec.recording_id, rec, env)
    score = ridge_envelope_score(pairs)
    print(f"wrote {len(pairs)} recordings to {out / 'recordings'}")
    ok = _check("ridge oracle >= 0.95", score >= 0.95, f"score {score:.4f}")
    return 0 if ok else 1


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfgs = resolve_configs(args)
    out = Path(args.out)
    train, val, _ = _datasets(cfgs, out)
    arch = ClassifierConfig(n_subjects=len(train.subjects()),
                            channels=cfgs["synth"].channels)
    metrics = MetricsLog(out / "metrics.csv")
    result = pretrain_classifier(train, val, cfgs["train"], arch=arch, metrics=metrics)
    save_network(out / "classifier", "classifier", result.classifier,
                 meta={"class_of": {str(k): v for k, v in result.class_of.items()},
                       "best_val_accuracy": result.best_val_accuracy,
                       "epochs_run": result.epochs_run,
                       "arch": dataclasses.asdict(arch),
                       "config_hash": config_hash(cfgs),
                       "data_hash": data_hash(cfgs)})
    print(f"wrote {out / 'classifier'} after {result.epochs_run} epochs")
    return 0 if _check("classifier converged", result.best_val_accuracy > 0.5,
                       f"val accuracy {result.best_val_accuracy:.4f}") else 1


def cmd_train(args: argparse.Namespace) -> int:
    cfgs = resolve_configs(args)
    out = Path(args.out)
    train, val, _ = _datasets(cfgs, out)
    _, _, clf_meta = load_archive(out / "classifier", expect_kind="classifier")
    if clf_meta.get("data_hash") != data_hash(cfgs):
        raise ParameterError(
            "train-codec: the stored classifier was trained on a different "
            f"cohort ({clf_meta.get('data_hash')} vs {data_hash(cfgs)}); "
            "rerun pretrain-classifier for this config")
    arch = ClassifierConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in clf_meta["arch"].items()})
    classifier = SubjectClassifier(arch, np.random.default_rng(0))
    load_network(out / "classifier", "classifier", classifier)

    metrics = MetricsLog(out / "metrics.csv")
    resume = out / "train_state"
    result = train_joint(train, val, classifier, cfgs["train"], metrics=metrics,
                         out_dir=out,
                         resume_from=resume if args.resume else None)
    stamp = {"config_hash": config_hash(cfgs), "data_hash": data_hash(cfgs),
             "mode": cfgs["window"].mode, "best_val_pcc": result.best_val_pcc,
             "epochs_run": result.epochs_run, "lam": cfgs["train"].lam}
    save_network(out / "codec", "codec", result.codec, meta=stamp)
    save_network(out / "estimator", "mi", result.estimator, meta=stamp)
    print(f"wrote {out / 'codec'} after {result.epochs_run} epochs "
          f"({result.codec_steps} codec steps, {result.estimator_steps} estimator steps)")
    return 0 if _check("joint training produced a usable codec",
                       np.isfinite(result.best_val_pcc),
                       f"best val pcc {result.best_val_pcc:.4f}") else 1


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfgs = resolve_configs(args)
    out = Path(args.out)
    mode = cfgs["window"].mode
    train, val, test = _datasets(cfgs, out)
    codec = EnvelopeCodec(CodecConfig(in_channels=cfgs["synth"].channels),
                          np.random.default_rng(0))
    meta = load_network(out / "codec", "codec", codec)
    if meta.get("data_hash") != data_hash(cfgs):
        raise ParameterError(
            "evaluate: codec checkpoint was trained on a different cohort "
            f"({meta.get('data_hash')} vs {data_hash(cfgs)}); refusing to mix")
    # reports carry the hash of the config that trained the codec
    run_hash = meta.get("config_hash", "")
    reports = [evaluate(codec, test, mode, model="codec",
                        config_hash=run_hash, probe_seed=cfgs["train"].seed)]
    if mode == "cross":
        # the same run's validation windows give the inner-subject reference
        reports.append(evaluate(codec, val, "inner", model="codec",
                                config_hash=run_hash,
                                probe_seed=cfgs["train"].seed))
    ok = True
    for report in reports:
        _print_report(report)
        ok &= _check(f"pcc values in [-1, 1] ({report.split})",
                     all(-1 <= s.mean_pcc <= 1 for s in report.scores))
        ok &= _check(f"probe accuracy in [0, 1] or absent ({report.split})",
                     np.isnan(report.probe_accuracy)
                     or 0 <= report.probe_accuracy <= 1)
    path = out / "reports.json"
    stored = []
    if path.is_file():
        stored = json.loads(path.read_text())["reports"]
    kept = [r for r in stored
            if (r["model"], r["split"]) not in {(n.model, n.split) for n in reports}]
    kept.extend(dataclasses.asdict(r) for r in reports)
    path.write_text(json.dumps({"reports": kept}, indent=1, sort_keys=True) + "\n")
    print(f"wrote {path}")
    return 0 if ok else 1


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    path = out / "reports.json"
    if not path.is_file():
        raise ParameterError(f"report: no evaluation results at {path}; run evaluate first")
    rows = json.loads(path.read_text())["reports"]
    reports = [MetricsReport(model=r["model"], split=r["split"],
                             scores=tuple(SubjectScore(**s) for s in r["scores"]),
                             probe_accuracy=r["probe_accuracy"],
                             config_hash=r["config_hash"]) for r in rows]
    paths = report_emit(out, reports)
    print(f"wrote {paths['csv']} and {paths['svg']}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    tol, ok = 1e-4, True

    def check_param(label, fn, tensor):
        nonlocal ok
        err = finite_difference_check(fn, tensor, max_entries=6, rng=rng)
        ok &= _check(f"gradcheck {label}", err < tol, f"max rel err {err:.2e}")

    def check(label, fn, x):
        check_param(label, fn, Tensor(x))

    kernel = Tensor(rng.normal(size=(3, 2, 3)))
    weight = Tensor(rng.normal(size=(4, 5)))
    bias = Tensor(rng.normal(size=4))
    checks = [
        ("conv1d", lambda t: ad.sum_all(ad.conv1d(t, kernel)),
         rng.normal(size=(2, 2, 8))),
        ("maxpool1d", lambda t: ad.sum_all(ad.maxpool1d(t, 2)),
         rng.normal(size=(2, 3, 8))),
        ("dense", lambda t: ad.sum_all(ad.dense_affine(t, weight, bias)),
         rng.normal(size=(3, 5))),
        ("softmax", lambda t: ad.sum_all(ad.square(ad.softmax_frames(t))),
         rng.normal(size=(2, 3, 5))),
        ("sigmoid", lambda t: ad.sum_all(ad.sigmoid(t)), rng.normal(size=(4, 4))),
        ("tanh", lambda t: ad.sum_all(ad.tanh(t)), rng.normal(size=(4, 4))),
        ("sqrt_clamped", lambda t: ad.sum_all(ad.sqrt_clamped(t)),
         rng.uniform(0.5, 2.0, size=(4, 4))),
        ("cross_entropy", lambda t: ad.cross_entropy_logits(t, np.array([0, 2, 1])),
         rng.normal(size=(3, 4))),
    ]
    for label, fn, x in checks:
        check(label, fn, x)

    codec = EnvelopeCodec(CodecConfig(in_channels=3, stage_channels=(4, 4, 6, 6, 8),
                                      decoder_channels=(6, 6, 4, 4)), rng)
    eeg = Tensor(rng.normal(size=(2, 3, 64)))
    env = Tensor(rng.normal(size=(2, 64)))
    for name in ("enc.0.kernel", "dec.1.kernel", "head.bias"):
        ad.zero_grads(codec.parameters().values())
        # the probed tensor IS the live parameter; the closure ignores it
        check_param(f"codec {name}",
                    lambda _: pearson_loss(codec.reconstruct(eeg), env),
                    codec.parameters()[name])

    clf = SubjectClassifier(ClassifierConfig(n_subjects=3, channels=4, scale=2,
                                             se_reduction=2, fused_channels=8,
                                             attn_dim=4), rng)
    x = Tensor(rng.normal(size=(2, 4, 16)))
    labels = np.array([0, 2])
    for name in ("cta.block.0.group.1.kernel", "cta.attn.proj.weight", "cta.head.weight"):
        ad.zero_grads(clf.parameters().values())
        check_param(f"classifier {name}",
                    lambda _: ad.cross_entropy_logits(clf.logits(x), labels),
                    clf.parameters()[name])
    return 0 if ok else 1


def cmd_mi_bench(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    n, dim, ok = 10_000, 1, True

    def fit(z_e, z_s, steps=400, lr=5e-3):
        est = MiEstimator(MiConfig(envelope_dim=dim, embedding_dim=dim, hidden=64), rng)
        adam = Adam(est.parameters(), lr)
        for _ in range(steps):
            pick = rng.choice(n, size=256, replace=False)
            ad.zero_grads(est.parameters().values())
            loss = est.fit_loss(Tensor(z_e[pick]), Tensor(z_s[pick]))
            ad.backward(loss)
            adam.step()
        return est

    z_e = rng.standard_normal((n, dim))
    z_s = rng.standard_normal((n, dim))
    est = fit(z_e, z_s)
    independent = est.estimate(z_e, z_s)
    ok &= _check("independent pairs |estimate| < 0.05 nats",
                 abs(independent) < 0.05, f"estimate {independent:+.4f}")

    rho = 0.9
    x = rng.standard_normal((n, dim))
    y = rho * x + np.sqrt(1 - rho ** 2) * rng.standard_normal((n, dim))
    est = fit(x, y)
    correlated = est.estimate(x, y)
    closed = -0.5 * np.log(1 - rho ** 2)
    print(f"[INFO] correlated pairs: estimate {correlated:.4f} nats "
          f"(true MI {closed:.4f}; with a well-fit conditional the "
          f"contrastive estimate overshoots strongly dependent pairs "
          f"by the lautum information, so it is a leakage score here, "
          f"not a calibrated MI readout)")
    ok &= _check("correlated estimate exceeds independent estimate",
                 correlated > independent + 0.5,
                 f"{correlated:.4f} vs {independent:+.4f}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eeg2env",
        description="EEG-to-envelope reconstruction with identity disentanglement")
    sub = parser.add_subparsers(dest="command", required=True)
    common = dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    def add(name, fn, help_, needs_config=True):
        p = sub.add_parser(name, help=help_, **common)
        p.add_argument("--out", default="runs/default", help="run directory")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (sets synth.seed and train.seed)")
        if needs_config:
            p.add_argument("--config", default=None, help="key = value config file")
            p.add_argument("--lambda", dest="lam", type=float, default=None,
                           help="disentanglement penalty weight (train.lam)")
            p.add_argument("--mode", choices=("inner", "cross"), default=None,
                           help="split protocol (window.mode)")
            _add_override_flags(p)
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, "generate the synthetic cohort and write recordings")
    add("pretrain-classifier", cmd_pretrain, "train the subject classifier")
    train_p = add("train-codec", cmd_train, "joint codec + estimator training")
    train_p.add_argument("--resume", action="store_true",
                         help="continue from the run's train_state archive")
    add("evaluate", cmd_evaluate, "score a trained codec on the held-out split")
    add("report", cmd_report, "emit report.csv and pcc_by_subject.svg",
        needs_config=False)
    add("gradcheck", cmd_gradcheck, "finite-difference checks on ops and networks",
        needs_config=False)
    add("mi-bench", cmd_mi_bench, "estimator calibration on known distributions",
        needs_config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CheckpointError, DimensionError, ParameterError, TrainingAbort) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
