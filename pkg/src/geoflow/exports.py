"""Reading and writing trajectory directories.

A trajectory directory holds::

    states.bin     tensors "states" (T, N, d) and "frame_index" (T,) in the checkpoint format
    depth.csv      frame,row,col,depth
    points.xyz     "x y z" per line, frames delimited by "# frame <t>"
    poses.csv      frame,r00..r22,t0,t1,t2 (world-to-camera, R row-major)
    manifest.json  provenance header plus world config

CSV files start with ``#`` comment lines carrying the provenance header,
followed by an RFC-4180 body with a column row.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ValidationError
from .toyworld import GeometryState

POSE_COLUMNS = ["frame"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["t0", "t1", "t2"]
REQUIRED = ("depth.csv", "points.xyz", "poses.csv")


def _fmt(x: float) -> str:
    return repr(float(x))


def _comment_block(header: dict) -> str:
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in sorted(header.items()))


def write_csv(path, header: dict, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(_comment_block(header))
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    text = Path(path).read_text(encoding="utf-8")
    header, body = {}, []
    for line in text.splitlines(keepends=True):
        if line.startswith("#") and not body:
            key, _, val = line[1:].strip().partition(": ")
            header[key] = json.loads(val) if val else None
        else:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ValidationError(f"{path}: no column row")
    return header, rows[0], rows[1:]


def write_json(path, header: dict, payload: dict) -> None:
    doc = {"header": header, **payload}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class GeometryExport:
    frames: np.ndarray        # (T,)
    depths: np.ndarray        # (T, H, W)
    points: np.ndarray        # (T, P, 3)
    rotations: np.ndarray     # (T, 3, 3)
    translations: np.ndarray  # (T, 3)


def write_geometry(out, header: dict, geo: GeometryExport) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    T, H, W = geo.depths.shape
    write_csv(out / "depth.csv", header, ["frame", "row", "col", "depth"],
              ([int(geo.frames[t]), r, c, float(geo.depths[t, r, c])]
               for t in range(T) for r in range(H) for c in range(W)))
    lines = [_comment_block(header)]
    for t in range(T):
        lines.append(f"# frame {int(geo.frames[t])}\n")
        lines.extend(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n" for p in geo.points[t])
    (out / "points.xyz").write_text("".join(lines), encoding="utf-8")
    write_csv(out / "poses.csv", header, POSE_COLUMNS,
              ([int(geo.frames[t]), *map(float, geo.rotations[t].ravel()), *map(float, geo.translations[t])]
               for t in range(T)))


def write_states(path, header: dict, states) -> None:
    tokens = np.stack([s.tokens for s in states]) if states else np.zeros((0, 0, 0))
    frames = np.array([s.frame_index for s in states], dtype=np.float64)
    checkpoint.save(path, header, {"states": tokens, "frame_index": frames})


def read_states(path) -> list[GeometryState]:
    ck = checkpoint.load(path, expected_names=("states", "frame_index"))
    return [GeometryState(np.array(tok, dtype=np.float64), int(f))
            for tok, f in zip(ck.tensors["states"], ck.tensors["frame_index"])]


def write_trajectory(out, header: dict, states, geo: GeometryExport, extra: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_states(out / "states.bin", header, states)
    write_geometry(out, header, geo)
    write_json(out / "manifest.json", header, extra or {})


def missing_files(directory) -> list[str]:
    d = Path(directory)
    return [f for f in REQUIRED if not (d / f).is_file()]


def read_geometry(directory) -> GeometryExport:
    d = Path(directory)
    missing = missing_files(d)
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    _, cols, rows = read_csv(d / "poses.csv")
    if cols != POSE_COLUMNS:
        raise ValidationError(f"{d / 'poses.csv'}: unexpected columns {cols}")
    poses = np.array(rows, dtype=np.float64).reshape(-1, len(POSE_COLUMNS))
    frames = poses[:, 0].astype(np.int64)
    rots = poses[:, 1:10].reshape(-1, 3, 3)
    trans = poses[:, 10:13]

    _, cols, rows = read_csv(d / "depth.csv")
    dep = np.array(rows, dtype=np.float64).reshape(-1, 4)
    H = int(dep[:, 1].max()) + 1 if len(dep) else 0
    W = int(dep[:, 2].max()) + 1 if len(dep) else 0
    depths = np.zeros((len(frames), H, W))
    where = {int(f): i for i, f in enumerate(frames)}
    for f, r, c, v in dep:
        if int(f) not in where:
            raise ValidationError(f"{d / 'depth.csv'}: frame {int(f)} has no pose")
        depths[where[int(f)], int(r), int(c)] = v

    per_frame: dict[int, list] = {}
    cur = None
    for line in (d / "points.xyz").read_text(encoding="utf-8").splitlines():
        if line.startswith("# frame "):
            cur = int(line.split()[2])
            per_frame[cur] = []
        elif line.startswith("#") or not line.strip():
            continue
        else:
            if cur is None:
                raise ValidationError(f"{d / 'points.xyz'}: point before any frame marker")
            per_frame[cur].append([float(v) for v in line.split()])
    if sorted(per_frame) != sorted(where):
        raise ValidationError(f"{d}: points.xyz frames {sorted(per_frame)} differ from poses.csv")
    points = np.array([per_frame[int(f)] for f in frames], dtype=np.float64)
    return GeometryExport(frames, depths, points, rots, trans)
