"""On-disk segment store and split manifests.

A store is a directory::

    manifest.tsv          # header comments, then id, class_id, true_length, tripleg_id, path
    segments/<id>.csv     # one row per timestep, one column per channel

Values are written with 17 significant digits, so float64 data round-trips
bit-exactly. Split manifests are plain text, one segment id per line, after
``#`` comment lines.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .dataset import Segment
from .errors import ParseError, ValidationError

STORE_FORMAT = "tmdnet-store/2"
COLUMNS = ("id", "class_id", "true_length", "tripleg_id", "path")


def segment_ids(segments: list[Segment]) -> list[str]:
    """``<tripleg>-<k>`` where k counts segments cut from the same tripleg."""
    seen: dict = {}
    out = []
    for s in segments:
        k = seen.get(s.tripleg_id, 0)
        seen[s.tripleg_id] = k + 1
        out.append(f"{s.tripleg_id}-{k}")
    return out


def write_store(directory, segments: list[Segment], channels, class_names, digest: str,
                seed: int) -> list[str]:
    directory = Path(directory)
    seg_dir = directory / "segments"
    seg_dir.mkdir(parents=True, exist_ok=True)
    ids = segment_ids(segments)
    buf = io.StringIO()
    buf.write(f"# format={STORE_FORMAT} config_digest={digest} seed={seed}\n")
    buf.write(f"# channels={','.join(channels)}\n")
    buf.write(f"# classes={','.join(class_names)}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(COLUMNS)
    for sid, s in zip(ids, segments):
        rel = f"segments/{sid}.csv"
        body = io.StringIO()
        body.write(",".join(channels) + "\n")
        np.savetxt(body, s.data[:, :s.true_length].T, fmt="%.17g", delimiter=",")
        (directory / rel).write_text(body.getvalue())
        w.writerow([sid, s.class_id, s.true_length, s.tripleg_id, rel])
    (directory / "manifest.tsv").write_text(buf.getvalue())
    return ids


def read_store(directory) -> tuple[dict, dict]:
    """Return (header, {id: Segment}) with ids in store order."""
    directory = Path(directory)
    path = directory / "manifest.tsv"
    header: dict = {}
    lines = path.read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for item in line[1:].split():
                key, _, value = item.partition("=")
                header[key] = value
        elif line.strip():
            body.append(line)
    if header.get("format") != STORE_FORMAT:
        raise ValidationError(f"{path}: not a segment store")
    header["channels"] = [c for c in header.get("channels", "").split(",") if c]
    header["classes"] = [c for c in header.get("classes", "").split(",") if c]
    rows = list(csv.reader(body, delimiter="\t"))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ParseError(f"{path}: expected column header {COLUMNS}")
    segments = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(COLUMNS):
            raise ParseError(f"{path}: expected {len(COLUMNS)} columns", lineno)
        sid, cid, length, tripleg, rel = row
        data = np.loadtxt(directory / rel, delimiter=",", skiprows=1, ndmin=2).T
        if data.shape[1] != int(length):
            raise ValidationError(f"{rel}: {data.shape[1]} rows, manifest says {length}")
        segments[sid] = Segment(data, int(length), int(cid), tripleg)
    return header, segments


def write_manifest(path, ids, digest: str, seed: int, name: str) -> None:
    body = [f"# set={name} config_digest={digest} seed={seed}"] + [str(i) for i in ids]
    Path(path).write_text("\n".join(body) + "\n")


def read_manifest(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.startswith("#")]
