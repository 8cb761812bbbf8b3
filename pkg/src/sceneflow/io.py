"""Scene-pair interchange format.

One directory per pair::

    cloud_t.ply, cloud_t1.ply   binary little-endian PLY, float32 x y z
    meta.json                   {"delta_t": float, "ego_motion": {...} | null}
    tracks_t.json, tracks_t1.json
    gt_flow.bin                 optional, N little-endian float32 triples

Predicted flow uses the ``.bin`` layout of ``gt_flow.bin``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import BoxTrack, RigidTransform, ScenePair

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


class FormatError(ValueError):
    pass


def write_ply(path, points):
    points = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(points).tobytes())


def read_ply(path):
    """Read the vertex x/y/z of a binary little-endian PLY as float64."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    count, props, in_vertex = None, [], False
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format" and tok[1] != "binary_little_endian":
            raise FormatError(f"{path}: unsupported PLY format {tok[1]}")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FormatError(f"{path}: list properties on vertices are unsupported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if count is None:
        raise FormatError(f"{path}: no vertex element")
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise FormatError(f"{path}: vertex lacks x/y/z")
    vertices = np.frombuffer(data, dtype=np.dtype(props), count=count, offset=body_start)
    return np.stack([vertices["x"], vertices["y"], vertices["z"]], axis=1).astype(np.float64)


def write_flow(path, flow):
    np.ascontiguousarray(np.asarray(flow, dtype="<f4").reshape(-1, 3)).tofile(path)


def read_flow(path, count=None):
    flow = np.fromfile(path, dtype="<f4")
    if flow.size % 3:
        raise FormatError(f"{path}: size is not a multiple of 3 floats")
    flow = flow.reshape(-1, 3).astype(np.float64)
    if count is not None and len(flow) != count:
        raise FormatError(f"{path}: {len(flow)} flow rows, expected {count}")
    return flow


def write_mask(path, mask):
    np.asarray(mask, dtype=np.uint8).tofile(path)


def write_labels(path, labels):
    np.asarray(labels, dtype="<i4").tofile(path)


def _transform_to_json(T):
    if T is None:
        return None
    return {"rotation": T.rotation.reshape(-1).tolist(),
            "translation": T.translation.tolist()}


def _transform_from_json(obj):
    if obj is None:
        return None
    return RigidTransform(np.reshape(obj["rotation"], (3, 3)), obj["translation"])


def tracks_to_json(tracks):
    return [{"track_id": b.track_id, "center": b.center.tolist(),
             "dimensions": b.dimensions.tolist(),
             "rotation": b.rotation.reshape(-1).tolist()} for b in tracks]


def tracks_from_json(items, frame_index=0):
    return tuple(
        BoxTrack(track_id=str(it["track_id"]), center=it["center"],
                 dimensions=it["dimensions"],
                 rotation=np.reshape(it["rotation"], (3, 3)),
                 frame_index=frame_index)
        for it in items)


def save_scene(directory, pair):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(directory / "cloud_t.ply", pair.cloud_t)
    write_ply(directory / "cloud_t1.ply", pair.cloud_t_delta)
    meta = {"delta_t": float(pair.delta_t), "ego_motion": _transform_to_json(pair.ego_motion)}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    (directory / "tracks_t.json").write_text(json.dumps(tracks_to_json(pair.tracks_t)))
    (directory / "tracks_t1.json").write_text(json.dumps(tracks_to_json(pair.tracks_t_delta)))
    if pair.gt_flow is not None:
        write_flow(directory / "gt_flow.bin", pair.gt_flow)


def load_scene(directory):
    """Load a scene pair.  Clouds and GT flow round-trip through float32."""
    directory = Path(directory)
    cloud_t = read_ply(directory / "cloud_t.ply")
    cloud_t1 = read_ply(directory / "cloud_t1.ply")
    meta_path = directory / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    tracks = []
    for name, idx in (("tracks_t.json", 0), ("tracks_t1.json", 1)):
        p = directory / name
        tracks.append(tracks_from_json(json.loads(p.read_text()), idx) if p.exists() else ())
    gt_path = directory / "gt_flow.bin"
    gt = read_flow(gt_path, len(cloud_t)) if gt_path.exists() else None
    return ScenePair(cloud_t=cloud_t, cloud_t_delta=cloud_t1,
                     delta_t=float(meta.get("delta_t", 0.1)),
                     ego_motion=_transform_from_json(meta.get("ego_motion")),
                     tracks_t=tracks[0], tracks_t_delta=tracks[1],
                     gt_flow=gt, name=directory.name)


def find_scenes(root):
    """Scene directories under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if (root / "cloud_t.ply").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "cloud_t.ply").exists())
