"""On-disk formats.

* Matrices: little-endian float32, row-major, in ``<name>.f32`` with a JSON
  sidecar ``<name>.json``. Patch sidecars hold
  ``{case_id, slide_id, rows, feature_dim, coords}``.
* Heatmaps (``.f32``) and masks (``.u8``, one byte per superpixel) use the
  sidecar ``{width, height, superpixel_um, dtype}``.
* Model snapshots: magic ``MILSNAP1``, uint32 format version, uint32 header
  length, a UTF-8 JSON header ``{config, step, tune_metric, arrays, ...}`` and
  then the float64 little-endian arrays listed in ``arrays`` in order.
* Tables: CSV with a header row; floats are written with ``repr`` so a value
  read back is bit-identical.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from milsurv.bags import CaseBag, Slide
from milsurv.errors import ValidationError
from milsurv.explain import ClusterModel
from milsurv.mil.model import MilModel
from milsurv.mil.optim import AdamState
from milsurv.roi import HeatmapGrid, RoiMaskGrid

SNAPSHOT_MAGIC = b"MILSNAP1"
SNAPSHOT_VERSION = 1


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON in {path}: {exc}") from None


# matrices --------------------------------------------------------------------


def write_f32(path: str | Path, matrix) -> None:
    np.ascontiguousarray(matrix, dtype="<f4").tofile(path)


def read_f32(path: str | Path, rows: int, cols: int) -> np.ndarray:
    try:
        data = np.fromfile(path, dtype="<f4")
    except FileNotFoundError:
        raise ValidationError(f"missing file: {path}") from None
    if data.size != rows * cols:
        raise ValidationError(f"{path}: expected {rows}x{cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(float)


def save_slide(directory: str | Path, case_id: str, slide: Slide) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_f32(d / f"{slide.slide_id}.f32", slide.patches)
    write_json(
        d / f"{slide.slide_id}.json",
        {
            "case_id": case_id,
            "slide_id": slide.slide_id,
            "rows": int(slide.patches.shape[0]),
            "feature_dim": int(slide.patches.shape[1]),
            "coords": slide.coords.tolist(),
        },
    )
    return [d / f"{slide.slide_id}.f32", d / f"{slide.slide_id}.json"]


def save_bags(directory: str | Path, bags: Iterable[CaseBag]) -> list[Path]:
    out = []
    for bag in bags:
        for slide in bag.slides:
            out += save_slide(directory, bag.case_id, slide)
    return out


def load_bags(directory: str | Path) -> dict[str, CaseBag]:
    """Read every patch matrix in ``directory`` grouped into bags by case id."""
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"missing patch directory: {d}")
    slides: dict[str, list[Slide]] = {}
    for side in sorted(d.glob("*.json")):
        meta = read_json(side)
        x = read_f32(side.with_suffix(".f32"), meta["rows"], meta["feature_dim"])
        slides.setdefault(meta["case_id"], []).append(Slide(meta["slide_id"], x, np.asarray(meta["coords"]).reshape(-1, 2)))
    return {cid: CaseBag(cid, tuple(sorted(s, key=lambda sl: sl.slide_id))) for cid, s in sorted(slides.items())}


# heatmaps and masks ------------------------------------------------------------


def save_heatmap(directory: str | Path, slide_id: str, h: HeatmapGrid) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_f32(d / f"{slide_id}.f32", h.values)
    write_json(
        d / f"{slide_id}.json",
        {"width": h.width, "height": h.height, "superpixel_um": h.superpixel_um, "dtype": "float32"},
    )
    return [d / f"{slide_id}.f32", d / f"{slide_id}.json"]


def load_heatmap(directory: str | Path, slide_id: str) -> HeatmapGrid:
    d = Path(directory)
    meta = read_json(d / f"{slide_id}.json")
    if meta.get("dtype") != "float32":
        raise ValidationError(f"{slide_id}: heatmap dtype must be float32")
    values = read_f32(d / f"{slide_id}.f32", meta["height"], meta["width"])
    return HeatmapGrid(values, meta.get("superpixel_um", 32))


def save_mask(directory: str | Path, slide_id: str, m: RoiMaskGrid, superpixel_um: float = 32) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(m.bits, dtype=np.uint8).tofile(d / f"{slide_id}.u8")
    write_json(
        d / f"{slide_id}.json",
        {"width": m.width, "height": m.height, "superpixel_um": superpixel_um, "dtype": "uint8"},
    )
    return [d / f"{slide_id}.u8", d / f"{slide_id}.json"]


def load_mask(directory: str | Path, slide_id: str) -> RoiMaskGrid:
    d = Path(directory)
    meta = read_json(d / f"{slide_id}.json")
    if meta.get("dtype") != "uint8":
        raise ValidationError(f"{slide_id}: mask dtype must be uint8")
    raw = np.fromfile(d / f"{slide_id}.u8", dtype=np.uint8)
    if raw.size != meta["width"] * meta["height"]:
        raise ValidationError(f"{slide_id}: mask size does not match its sidecar")
    if not np.isin(raw, (0, 1)).all():
        raise ValidationError(f"{slide_id}: mask values must be 0 or 1")
    return RoiMaskGrid(raw.reshape(meta["height"], meta["width"]).astype(bool))


def grid_ids(directory: str | Path) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob("*.json"))


# cluster models --------------------------------------------------------------


def save_cluster_model(base: str | Path, model: ClusterModel) -> list[Path]:
    base = Path(base)
    write_f32(base.with_suffix(".f32"), model.centroids)
    write_json(
        base.with_suffix(".json"),
        {
            "k": model.k,
            "dim": model.dim,
            "fit_sample_size": model.fit_sample_size,
            "n_iter": model.n_iter,
            "inertia_history": list(model.inertia_history),
        },
    )
    return [base.with_suffix(".f32"), base.with_suffix(".json")]


def load_cluster_model(base: str | Path) -> ClusterModel:
    base = Path(base)
    meta = read_json(base.with_suffix(".json"))
    c = read_f32(base.with_suffix(".f32"), meta["k"], meta["dim"])
    return ClusterModel(c, meta["fit_sample_size"], tuple(meta["inertia_history"]), meta["n_iter"])


# model snapshots ---------------------------------------------------------------


@dataclass
class Snapshot:
    model: MilModel
    config: dict
    step: int
    tune_metric: float | None
    adam: AdamState | None = None
    extra: dict | None = None


def save_snapshot(
    path: str | Path,
    model: MilModel,
    config: dict,
    step: int,
    tune_metric: float | None,
    adam: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    arrays = list(model.parameters())
    names = model.parameter_names()
    header = {
        "config": config,
        "step": int(step),
        "tune_metric": tune_metric,
        "n_model_arrays": len(arrays),
        "names": names,
        "extra": extra or {},
    }
    if adam is not None:
        arrays += adam.m + adam.v
        header["adam"] = {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    header["arrays"] = [list(a.shape) for a in arrays]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<II", SNAPSHOT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_snapshot(path: str | Path) -> Snapshot:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"missing snapshot: {path}") from None
    if raw[:8] != SNAPSHOT_MAGIC:
        raise ValidationError(f"{path}: not a model snapshot")
    if len(raw) < 16:
        raise ValidationError(f"{path}: truncated snapshot")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != SNAPSHOT_VERSION:
        raise ValidationError(f"{path}: unsupported snapshot version {version}")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ValidationError(f"{path}: malformed snapshot header") from None
    offset = 16 + hlen
    counts = [int(np.prod(shape)) if shape else 1 for shape in header["arrays"]]
    if offset + 8 * sum(counts) != len(raw):
        raise ValidationError(f"{path}: trailing or missing bytes")
    arrays = []
    for shape, count in zip(header["arrays"], counts):
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float))
        offset += 8 * count
    n = header["n_model_arrays"]
    model = MilModel.from_parameters(arrays[:n])
    adam = None
    if "adam" in header:
        rest = arrays[n:]
        a = header["adam"]
        adam = AdamState(rest[: len(rest) // 2], rest[len(rest) // 2 :], a["t"], a["beta1"], a["beta2"], a["eps"])
    return Snapshot(model, header["config"], header["step"], header["tune_metric"], adam, header.get("extra", {}))


# tables ------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str | Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise ValidationError(f"missing file: {path}") from None
