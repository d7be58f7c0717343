"""File formats: loaders and writers for every artifact the engine touches.

Formats
-------
* embeddings: binary (magic ``IQPPEMB1``, little-endian u32 dim, u64 count,
  u16 length-prefixed UTF-8 ids, then count*dim little-endian f32) or JSONL
  (one ``{"id": str, "v": [floats]}`` per line).
* qrels: TSV ``query_id<TAB>doc_id<TAB>label`` with labels 1/0/-1.
* scores: TSV ``query_id<TAB>score`` with ``# key=value`` header comments.
* detections: JSONL ``{"id": str, "boxes": [{"w": W, "h": H}, ...]}``.
* similarity matrices: binary, magic ``IQPPMAT1``.
* fitted models: framed binary (magic + JSON header + raw arrays).

Writers are deterministic: stable key ordering, floats via repr (shortest
round-trip form), no timestamps. Every loader either returns exactly the
rows present or raises; nothing is silently dropped.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

import numpy as np

from .core import (
    EffectivenessTable,
    EmbeddingStore,
    Label,
    Measure,
    Orientation,
    PredictorOutput,
    Qrels,
    RankedList,
)
from .errors import (
    DuplicateId,
    FormatError,
    MissingDetections,
    UnknownLabel,
)

MAGIC_EMB = b"IQPPEMB1"
MAGIC_MAT = b"IQPPMAT1"
MAGIC_KMEANS = b"IQPPKMN1"
MAGIC_CLASSHEAD = b"IQPPMLP1"
MAGIC_SVR = b"IQPPSVR1"


def fmt_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(x))


def _jsonsafe(obj: Any) -> Any:
    """Recursively replace non-finite floats with None for strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonsafe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonsafe(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonsafe(obj.item())
    return obj


def dump_json(obj: Any, path: str | Path) -> None:
    text = json.dumps(_jsonsafe(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e


# ---------------------------------------------------------------- embeddings


def write_embeddings_binary(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC_EMB)
        fh.write(struct.pack("<IQ", store.dim, len(store.ids)))
        for doc_id in store.ids:
            raw = doc_id.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"id too long for format: {doc_id[:32]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(
            np.ascontiguousarray(store.vectors, dtype="<f4").tobytes(order="C")
        )


def write_embeddings_jsonl(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, row in zip(store.ids, store.vectors):
            vec = [float(v) for v in row]
            fh.write(json.dumps({"id": doc_id, "v": vec}) + "\n")


def _load_embeddings_binary(raw: bytes, path: str | Path) -> EmbeddingStore:
    off = len(MAGIC_EMB)
    header = struct.calcsize("<IQ")
    if len(raw) < off + header:
        raise FormatError(f"{path}: truncated header")
    dim, count = struct.unpack_from("<IQ", raw, off)
    off += header
    ids = []
    for _ in range(count):
        if off + 2 > len(raw):
            raise FormatError(f"{path}: truncated id table")
        (idlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + idlen > len(raw):
            raise FormatError(f"{path}: truncated id table")
        try:
            ids.append(raw[off : off + idlen].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: id is not valid UTF-8") from e
        off += idlen
    payload = count * dim * 4
    if len(raw) - off != payload:
        raise FormatError(
            f"{path}: expected {payload} payload bytes, found {len(raw) - off}"
        )
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=off)
    vectors = vectors.reshape(count, dim).astype(np.float32)
    return EmbeddingStore.create(ids, vectors)


def _load_embeddings_jsonl(text: str, path: str | Path) -> EmbeddingStore:
    ids: list[str] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
        if not isinstance(obj, dict) or "id" not in obj or "v" not in obj:
            raise FormatError(f"{path}:{lineno}: need keys 'id' and 'v'")
        if not isinstance(obj["id"], str):
            raise FormatError(f"{path}:{lineno}: 'id' must be a string")
        if not isinstance(obj["v"], list):
            raise FormatError(f"{path}:{lineno}: 'v' must be a list")
        ids.append(obj["id"])
        rows.append([float(v) for v in obj["v"]])
    if rows:
        width = len(rows[0])
        for lineno, row in enumerate(rows, start=1):
            if len(row) != width:
                raise FormatError(
                    f"{path}: row {lineno} has {len(row)} values, expected {width}"
                )
    arr = np.array(rows, dtype=np.float32)
    return EmbeddingStore.create(ids, arr)


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Load either accepted embedding format, sniffing by magic."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC_EMB)] == MAGIC_EMB:
        return _load_embeddings_binary(raw, path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: neither {MAGIC_EMB!r} binary nor UTF-8 JSONL") from e
    return _load_embeddings_jsonl(text, path)


# --------------------------------------------------------------------- qrels

_LABELS = {1: Label.RELEVANT, 0: Label.NONRELEVANT, -1: Label.IGNORE}


def load_qrels(
    path: str | Path, collection_ids: Iterable[str] | None = None
) -> Qrels:
    labels: dict[str, dict[str, Label]] = {}
    for lineno, fields in _tsv_rows(path):
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
        qid, did, raw = fields
        try:
            value = int(raw)
        except ValueError:
            raise UnknownLabel(f"{path}:{lineno}: label {raw!r} is not an integer")
        if value not in _LABELS:
            raise UnknownLabel(f"{path}:{lineno}: label must be 1, 0 or -1, got {value}")
        per_query = labels.setdefault(qid, {})
        if did in per_query:
            raise DuplicateId(f"{path}:{lineno}: repeated pair ({qid!r}, {did!r})")
        per_query[did] = _LABELS[value]
    return Qrels.create(labels, collection_ids)


def write_qrels(qrels: Qrels, path: str | Path, header: Mapping[str, str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_header(fh, header)
        for qid in sorted(qrels.labels):
            for did in sorted(qrels.labels[qid]):
                fh.write(f"{qid}\t{did}\t{qrels.labels[qid][did].value}\n")


# -------------------------------------------------------------------- scores


def load_scores(path: str | Path, name: str | None = None) -> PredictorOutput:
    meta: dict[str, str] = {}
    scores: dict[str, float] = {}
    for lineno, fields in _tsv_rows(path, meta):
        if len(fields) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(fields)}")
        qid, raw = fields
        if qid in scores:
            raise DuplicateId(f"{path}:{lineno}: repeated query id {qid!r}")
        try:
            scores[qid] = float(raw)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: score {raw!r} is not a number")
    if "orientation" not in meta:
        raise FormatError(f"{path}: missing '# orientation=' header")
    try:
        orientation = Orientation(meta["orientation"])
    except ValueError:
        raise FormatError(f"{path}: unknown orientation {meta['orientation']!r}")
    resolved = name or meta.get("predictor") or Path(path).stem
    return PredictorOutput(name=resolved, orientation=orientation, scores=scores)


def write_scores(
    out: PredictorOutput, path: str | Path, header: Mapping[str, str] | None = None
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# predictor={out.name}\n")
        fh.write(f"# orientation={out.orientation.value}\n")
        _write_header(fh, header)
        for qid in sorted(out.scores):
            fh.write(f"{qid}\t{fmt_float(out.scores[qid])}\n")


# ---------------------------------------------------------------- detections


class Box(NamedTuple):
    w: float
    h: float


@dataclass(frozen=True)
class DetectionFile:
    """Per query id: detected bounding boxes (width, height in pixels)."""

    boxes: Mapping[str, tuple[Box, ...]]

    def for_query(self, qid: str) -> tuple[Box, ...]:
        if qid not in self.boxes:
            raise MissingDetections(f"no detections recorded for query {qid!r}")
        return self.boxes[qid]


def load_detections(path: str | Path) -> DetectionFile:
    boxes: dict[str, tuple[Box, ...]] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
        if not isinstance(obj, dict) or "id" not in obj or "boxes" not in obj:
            raise FormatError(f"{path}:{lineno}: need keys 'id' and 'boxes'")
        qid = obj["id"]
        if not isinstance(qid, str):
            raise FormatError(f"{path}:{lineno}: 'id' must be a string")
        if qid in boxes:
            raise DuplicateId(f"{path}:{lineno}: repeated query id {qid!r}")
        parsed = []
        for b in obj["boxes"]:
            if not isinstance(b, dict) or "w" not in b or "h" not in b:
                raise FormatError(f"{path}:{lineno}: each box needs 'w' and 'h'")
            w, h = float(b["w"]), float(b["h"])
            if not (math.isfinite(w) and math.isfinite(h) and w > 0 and h > 0):
                raise FormatError(
                    f"{path}:{lineno}: box sides must be positive finite, got {w}x{h}"
                )
            parsed.append(Box(w, h))
        boxes[qid] = tuple(parsed)
    return DetectionFile(boxes=boxes)


def write_detections(dets: DetectionFile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(dets.boxes):
            row = {
                "id": qid,
                "boxes": [{"w": b.w, "h": b.h} for b in dets.boxes[qid]],
            }
            fh.write(json.dumps(row) + "\n")


# ------------------------------------------------------------- ranked lists


def write_ranked_lists(
    lists: Iterable[RankedList], path: str | Path, header: Mapping[str, str] | None = None
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_header(fh, header)
        for rl in lists:
            for rank, (did, score) in enumerate(zip(rl.ids, rl.scores), start=1):
                fh.write(f"{rl.query_id}\t{rank}\t{did}\t{fmt_float(score)}\n")


def load_ranked_lists(path: str | Path) -> dict[str, RankedList]:
    per_query: dict[str, tuple[list[str], list[float]]] = {}
    for lineno, fields in _tsv_rows(path):
        if len(fields) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        qid, rank_raw, did, score_raw = fields
        ids, scores = per_query.setdefault(qid, ([], []))
        try:
            rank = int(rank_raw)
            score = float(score_raw)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad rank or score")
        if rank != len(ids) + 1:
            raise FormatError(
                f"{path}:{lineno}: rank {rank} out of order for query {qid!r}"
            )
        ids.append(did)
        scores.append(score)
    return {
        qid: RankedList(qid, tuple(ids), np.array(scores, dtype=np.float64))
        for qid, (ids, scores) in per_query.items()
    }


# ------------------------------------------------------------- effectiveness


def write_effectiveness(
    table: EffectivenessTable, path: str | Path, header: Mapping[str, str] | None = None
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# measure={table.measure.value}\n")
        if table.k is not None:
            fh.write(f"# k={table.k}\n")
        _write_header(fh, header)
        for qid in sorted(table.values):
            fh.write(f"{qid}\t{fmt_float(table.values[qid])}\n")


def load_effectiveness(path: str | Path) -> EffectivenessTable:
    meta: dict[str, str] = {}
    values: dict[str, float] = {}
    for lineno, fields in _tsv_rows(path, meta):
        if len(fields) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(fields)}")
        qid, raw = fields
        if qid in values:
            raise DuplicateId(f"{path}:{lineno}: repeated query id {qid!r}")
        values[qid] = float(raw)
    if "measure" not in meta:
        raise FormatError(f"{path}: missing '# measure=' header")
    try:
        measure = Measure(meta["measure"])
    except ValueError:
        raise FormatError(f"{path}: unknown measure {meta['measure']!r}")
    k = int(meta["k"]) if "k" in meta else None
    return EffectivenessTable(measure=measure, values=values, k=k)


# --------------------------------------------------------------------- folds


def write_folds(
    folds: Mapping[str, int], path: str | Path, header: Mapping[str, str] | None = None
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_header(fh, header)
        for qid in sorted(folds):
            fh.write(f"{qid}\t{folds[qid]}\n")


def load_folds(path: str | Path) -> dict[str, int]:
    folds: dict[str, int] = {}
    for lineno, fields in _tsv_rows(path):
        if len(fields) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(fields)}")
        qid, raw = fields
        if qid in folds:
            raise DuplicateId(f"{path}:{lineno}: repeated query id {qid!r}")
        try:
            folds[qid] = int(raw)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: fold index {raw!r} is not an integer")
    return folds


# -------------------------------------------------------- similarity matrices


def write_similarity_matrices(
    matrices: Mapping[str, np.ndarray], path: str | Path, meta: Mapping[str, Any] | None = None
) -> None:
    """Binary pack of per-query k x k float32 similarity matrices."""
    meta_raw = json.dumps(_jsonsafe(dict(meta or {})), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_MAT)
        fh.write(struct.pack("<I", len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<Q", len(matrices)))
        for qid in sorted(matrices):
            mat = np.asarray(matrices[qid], dtype="<f4")
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise FormatError(f"matrix for {qid!r} is not square")
            raw = qid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", mat.shape[0]))
            fh.write(np.ascontiguousarray(mat).tobytes(order="C"))


def load_similarity_matrices(
    path: str | Path,
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC_MAT)] != MAGIC_MAT:
        raise FormatError(f"{path}: bad magic, expected {MAGIC_MAT!r}")
    off = len(MAGIC_MAT)
    try:
        (meta_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (idlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            qid = raw[off : off + idlen].decode("utf-8")
            off += idlen
            (side,) = struct.unpack_from("<I", raw, off)
            off += 4
            n = side * side
            mat = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += n * 4
            if qid in out:
                raise DuplicateId(f"{path}: repeated matrix id {qid!r}")
            out[qid] = mat.reshape(side, side).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: truncated or corrupt matrix file: {e}") from e
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out, meta


# ------------------------------------------------------------- framed models


def write_framed(
    path: str | Path,
    magic: bytes,
    meta: Mapping[str, Any],
    arrays: Mapping[str, np.ndarray],
) -> None:
    """Magic + JSON header + concatenated raw little-endian array payloads."""
    manifest = []
    payloads = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
        arr = np.ascontiguousarray(arr, dtype=dtype)
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payloads.append(arr.tobytes(order="C"))
    header = dict(meta)
    header["__arrays__"] = manifest
    raw = json.dumps(_jsonsafe(header), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for chunk in payloads:
            fh.write(chunk)


def read_framed(
    path: str | Path, magic: bytes
) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    off = len(magic)
    try:
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
        off += hlen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e
    manifest = header.pop("__arrays__", [])
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        dtype = np.dtype(entry["dtype"])
        nbytes = n * dtype.itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated array payload {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=n, offset=off
        ).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


# -------------------------------------------------------------------- report


def write_report(report, out_dir: str | Path) -> None:
    """Emit report.csv, report.json and plotdata/ under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report.to_json_dict(), out / "report.json")
    with open(out / "report.csv", "w", encoding="utf-8") as fh:
        for row in report.csv_rows():
            fh.write(",".join(row) + "\n")
    for rel_path, pairs in report.plot_series():
        target = out / "plotdata" / rel_path
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8") as fh:
            fh.write("# ground_truth\tpredicted\n")
            for gt, pred in pairs:
                fh.write(f"{fmt_float(gt)}\t{fmt_float(pred)}\n")


# ------------------------------------------------------------------- helpers


def _write_header(fh, header: Mapping[str, str] | None) -> None:
    for key in sorted(header or {}):
        fh.write(f"# {key}={header[key]}\n")


def _tsv_rows(path: str | Path, meta: dict[str, str] | None = None):
    """Yield (lineno, fields) for data rows; collect '# k=v' comments."""
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if meta is not None:
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    meta[key.strip()] = value.strip()
            continue
        yield lineno, line.split("\t")
