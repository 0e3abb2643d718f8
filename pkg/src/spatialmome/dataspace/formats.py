"""Slide manifests and the binary feature-matrix layout.

Feature files: ``b"STRM"``, uint32 LE version, uint64 LE rows, uint64 LE
cols, then row-major float32 LE values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..fileio import atomic_write_bytes, atomic_write_text, csv_text, read_csv
from .types import FormatError, GenePanel, SlideDataset, SpotRecord

FEATURES_MAGIC = b"STRM"
FEATURES_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def encode_features(matrix: np.ndarray) -> bytes:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    return _HEADER.pack(FEATURES_MAGIC, FEATURES_VERSION, m.shape[0], m.shape[1]) + m.tobytes()


def decode_features(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(payload) < _HEADER.size:
        raise FormatError(f"{source}: truncated feature header")
    magic, version, rows, cols = _HEADER.unpack_from(payload)
    if magic != FEATURES_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != FEATURES_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    body = payload[_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise FormatError(f"{source}: expected {rows}x{cols} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_features(path, matrix: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_features(matrix))


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return decode_features(path.read_bytes(), str(path))


def write_panel(path, panel: GenePanel) -> Path:
    return atomic_write_text(path, "".join(g + "\n" for g in panel.genes))


def read_panel(path, panel_id: str | None = None) -> GenePanel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    genes = [line.rstrip("\r\n") for line in path.read_text(encoding="utf-8").splitlines()]
    genes = [g for g in genes if g]
    return GenePanel(panel_id or path.stem, tuple(genes))


def write_slide(dataset: SlideDataset, directory) -> Path:
    """Write ``dataset`` as a manifest plus sidecar files; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sid = dataset.slide_id
    files = {
        "panel_file": f"{sid}_panel.txt",
        "coords_file": f"{sid}_coords.csv",
        "expr_file": f"{sid}_expr.csv",
        "features_file": f"{sid}_features.bin",
    }
    write_panel(d / files["panel_file"], dataset.panel)
    if dataset.coordinate_mode == "grid":
        header = ["spot_id", "row", "col"]
        rows = [(s.spot_id, int(s.coord[0]), int(s.coord[1])) for s in dataset.spots]
    else:
        header = ["spot_id", "x_um", "y_um"]
        rows = [(s.spot_id, float(s.coord[0]), float(s.coord[1])) for s in dataset.spots]
    atomic_write_text(d / files["coords_file"], csv_text(header, rows))
    triplets = ((s.spot_id, gi, int(s.expression[gi]))
                for s in dataset.spots for gi in sorted(s.expression) if s.expression[gi] != 0)
    atomic_write_text(d / files["expr_file"], csv_text(["spot_id", "gene_index", "count"], triplets))
    write_features(d / files["features_file"], dataset.features())
    manifest = {"slide_id": sid, "panel_id": dataset.panel.panel_id, **files,
                "coordinate_mode": dataset.coordinate_mode, "feature_dim": dataset.feature_dim}
    if dataset.has_labels:
        files["labels_file"] = manifest["labels_file"] = f"{sid}_labels.csv"
        atomic_write_text(d / files["labels_file"],
                          csv_text(["spot_id", "label"], ((s.spot_id, s.label) for s in dataset.spots)))
    path = d / f"{sid}.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


_REQUIRED = ("slide_id", "panel_file", "coords_file", "expr_file", "features_file",
             "coordinate_mode", "feature_dim")


def load_slide(manifest_path) -> SlideDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in _REQUIRED:
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    base = manifest_path.parent
    mode = manifest["coordinate_mode"]
    feature_dim = int(manifest["feature_dim"])
    panel = read_panel(base / manifest["panel_file"], manifest.get("panel_id"))

    coords_path = base / manifest["coords_file"]
    header, rows = read_csv(coords_path)
    expected = ["spot_id", "row", "col"] if mode == "grid" else ["spot_id", "x_um", "y_um"]
    if header != expected:
        raise FormatError(f"{coords_path}: header {header} does not match {expected}")
    ids: list[str] = []
    coords: list[tuple[float, float]] = []
    seen: set[str] = set()
    for row in rows:
        sid = row[0]
        if sid in seen:
            raise FormatError(f"{coords_path}: duplicate spot_id {sid!r}")
        seen.add(sid)
        ids.append(sid)
        conv = int if mode == "grid" else float
        coords.append((conv(row[1]), conv(row[2])))
    pos = {sid: i for i, sid in enumerate(ids)}

    expr: list[dict[int, int]] = [{} for _ in ids]
    expr_path = base / manifest["expr_file"]
    header, rows = read_csv(expr_path)
    if header != ["spot_id", "gene_index", "count"]:
        raise FormatError(f"{expr_path}: bad header {header}")
    for row in rows:
        sid, gi, c = row[0], int(row[1]), int(row[2])
        if sid not in pos:
            raise FormatError(f"{expr_path}: unknown spot_id {sid!r}")
        if not 0 <= gi < len(panel):
            raise FormatError(f"{expr_path}: gene_index {gi} out of range for {len(panel)}-gene panel "
                              f"(spot {sid!r})")
        if c < 0:
            raise FormatError(f"{expr_path}: negative count for spot {sid!r}")
        expr[pos[sid]][gi] = c

    feats_path = base / manifest["features_file"]
    feats = read_features(feats_path)
    if feats.shape != (len(ids), feature_dim):
        raise FormatError(f"{feats_path}: shape {feats.shape} != ({len(ids)}, {feature_dim})")

    labels: list[str | None] = [None] * len(ids)
    if manifest.get("labels_file"):
        lab_path = base / manifest["labels_file"]
        header, rows = read_csv(lab_path)
        if header != ["spot_id", "label"]:
            raise FormatError(f"{lab_path}: bad header {header}")
        for sid, lab in rows:
            if sid not in pos:
                raise FormatError(f"{lab_path}: unknown spot_id {sid!r}")
            labels[pos[sid]] = lab

    spots = [SpotRecord(sid, coords[i], expr[i], feats[i].copy(), labels[i]) for i, sid in enumerate(ids)]
    return SlideDataset(manifest["slide_id"], panel, spots, mode, feature_dim)
