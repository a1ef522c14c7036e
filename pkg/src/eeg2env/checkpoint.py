"""Named-parameter archives: a JSON manifest next to packed float64 blobs.

An archive is a directory holding manifest.json and data.bin.  The
manifest records a kind tag (codec, classifier, mi, train-state), the
name/shape/offset of every array, and a free-form JSON meta block; the
blob file carries the arrays little-endian in manifest order.  Loads are
validated end to end so a truncated or mislabeled archive fails loudly
instead of yielding silently wrong weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ParameterError
from .network import Network

_FORMAT_VERSION = 1


def save_archive(path: str | Path, kind: str,
                 arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    if not kind or not isinstance(kind, str):
        raise ParameterError(f"save_archive: kind must be a non-empty string, got {kind!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)  # keeps 0-d shapes intact
        blob = a.astype("<f8", order="C").tobytes()
        entries.append({"name": name, "shape": list(a.shape),
                        "offset": offset, "bytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    manifest = {"format_version": _FORMAT_VERSION, "kind": kind,
                "arrays": entries, "meta": meta or {}}
    (path / "data.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_archive(path: str | Path,
                 expect_kind: str | None = None) -> tuple[str, dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"no archive manifest at {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt archive manifest at {path}: {err}") from err
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {manifest.get('format_version')!r}, "
            f"expected {_FORMAT_VERSION}")
    kind = manifest.get("kind")
    if not isinstance(kind, str) or not kind:
        raise CheckpointError(f"{path} has no kind tag")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path} holds a {kind!r} archive, expected {expect_kind!r}")
    try:
        raw = (path / "data.bin").read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read archive data at {path}: {err}") from err
    entries = manifest.get("arrays")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path} manifest lists no arrays")
    arrays: dict[str, np.ndarray] = {}
    for e in entries:
        try:
            name, shape = e["name"], tuple(int(s) for s in e["shape"])
            lo, nbytes = int(e["offset"]), int(e["bytes"])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"{path} has a malformed array entry: {e!r}") from err
        want = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if nbytes != want or lo < 0 or lo + nbytes > len(raw):
            raise CheckpointError(
                f"{path} array {name!r} does not fit its blob "
                f"(offset {lo}, {nbytes} bytes, data.bin has {len(raw)})")
        arrays[name] = np.frombuffer(raw[lo:lo + nbytes], dtype="<f8").reshape(shape).copy()
    meta = manifest.get("meta", {})
    if not isinstance(meta, dict):
        raise CheckpointError(f"{path} meta block is not a mapping")
    return kind, arrays, meta


def save_network(path: str | Path, kind: str, net: Network,
                 meta: dict | None = None) -> None:
    save_archive(path, kind, net.export_arrays(), meta)


def load_network(path: str | Path, kind: str, net: Network) -> dict:
    """Load a matching-kind archive into net; returns the meta block."""
    _, arrays, meta = load_archive(path, expect_kind=kind)
    net.load_arrays(arrays)
    return meta
