"""Dataset model and on-disk formats.

Episode directory layout::

    episode.json              schema, id, instruction, cameras, frame index
    images/<frame>_<cam>.png  8-bit RGB
    tensors/actions.gstf      (T, A) float32 action stream
    tensors/teacher/*.gstf    optional pseudo-labels (point maps, poses, ...)
    scenes/<frame>.ply        optional per-frame Gaussian scenes

RawTensorFile (``.gstf``) byte layout, all little-endian::

    b"GSTF" | version u32 | ndim u32 | dims u32[ndim] | dtype u32 | payload

with dtype code 0 = float32 and a row-major payload of prod(dims) * 4 bytes.
"""
from __future__ import annotations

import json
import math
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConflictError, FormatError, InvalidInputError, LoadError, ParseError
from .geometry import CameraModel

GSTF_MAGIC = b"GSTF"
GSTF_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}
EPISODE_SCHEMA = 1
MANIFEST_SCHEMA = 1
PROVENANCE = ("source", "augmented")


# ---------------------------------------------------------------------------
# raw tensors
# ---------------------------------------------------------------------------

def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        if not np.issubdtype(arr.dtype, np.floating):
            raise InvalidInputError(f"raw tensors hold float32 data, got {arr.dtype}")
        arr = arr.astype(np.float32)
    if any(d >= 2 ** 32 for d in arr.shape):
        raise InvalidInputError("tensor dimension does not fit in u32")
    header = GSTF_MAGIC + struct.pack(f"<II{arr.ndim}II", GSTF_VERSION, arr.ndim, *arr.shape, 0)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 12:
        raise ParseError("raw tensor header is truncated", offset=len(blob))
    if blob[:4] != GSTF_MAGIC:
        raise FormatError(f"bad raw tensor magic {blob[:4]!r}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != GSTF_VERSION:
        raise FormatError(f"unsupported raw tensor version {version}")
    off = 12
    if len(blob) < off + 4 * ndim + 4:
        raise ParseError("raw tensor dims are truncated", offset=len(blob))
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    (code,) = struct.unpack_from("<I", blob, off)
    off += 4
    if code not in DTYPE_CODES:
        raise FormatError(f"unsupported raw tensor dtype code {code}")
    dt = DTYPE_CODES[code]
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(blob) - off != n * dt.itemsize:
        raise ParseError(f"raw tensor payload has {len(blob) - off} bytes, expected {n * dt.itemsize}", offset=off)
    return np.frombuffer(blob, dtype=dt, offset=off, count=n).reshape(dims).astype(np.float32)


def write_tensor(path, array):
    _atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def _atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    _atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n").encode())


def json_number(x):
    """JSON-safe float: infinities become the strings "inf" / "-inf"."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


# ---------------------------------------------------------------------------
# images and cameras
# ---------------------------------------------------------------------------

def to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InvalidInputError(f"PNG images must be (H, W, 3), got {arr.shape}")
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=parent)
    os.close(fd)
    try:
        Image.fromarray(arr, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except FileNotFoundError:
        raise
    except Exception as e:
        raise FormatError(f"cannot decode image {path}: {e}") from None


def write_camera(path, cam: CameraModel):
    write_json(path, cam.to_dict())


def read_camera(path) -> CameraModel:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"camera file is not valid JSON: {e.msg}", offset=e.pos) from None
    try:
        return CameraModel.from_dict(d)
    except InvalidInputError as e:
        raise LoadError(f"camera file: {e}", field="camera") from None


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    timestamp: float
    images: dict          # camera name -> (H, W, 3) uint8
    action: np.ndarray    # (A,) float32


@dataclass
class Episode:
    id: str
    frames: list
    instruction: str
    cameras: dict                       # name -> CameraModel
    wrist_cameras: tuple = ()
    teacher: dict = field(default_factory=dict)   # name -> float32 array
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.id or "/" in self.id or self.id.startswith("."):
            raise LoadError(f"invalid episode id {self.id!r}", field="id")
        names = set(self.cameras)
        for w in self.wrist_cameras:
            if w not in names:
                raise LoadError(f"wrist camera '{w}' is not among the episode cameras", field="wrist_cameras")
        lengths = set()
        last = -math.inf
        for i, fr in enumerate(self.frames):
            if set(fr.images) != names:
                raise LoadError(f"frame {i} references cameras {sorted(fr.images)}, expected {sorted(names)}",
                                field=f"frames[{i}].images")
            if not fr.timestamp > last:
                raise LoadError(f"timestamps must be strictly increasing (frame {i})", field=f"frames[{i}].timestamp")
            last = fr.timestamp
            a = np.asarray(fr.action)
            if a.ndim != 1:
                raise LoadError(f"frame {i} action must be a vector", field=f"frames[{i}].action")
            lengths.add(a.shape[0])
        if len(lengths) > 1:
            raise LoadError(f"action vectors have differing lengths {sorted(lengths)}", field="actions")

    @property
    def external_cameras(self):
        return [n for n in self.cameras if n not in self.wrist_cameras]

    def actions(self):
        if not self.frames:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([np.asarray(f.action, dtype=np.float32) for f in self.frames])


def _frame_png(i, cam):
    return f"images/{i:06d}_{cam}.png"


def save_episode(ep: Episode, path, scenes=None):
    """Write ``ep`` (and optional per-frame scenes) to ``path`` via a temp dir and atomic rename."""
    from .gaussians import ply_export
    ep.validate()
    path = os.path.abspath(os.fspath(path))
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-episode-", dir=parent)
    try:
        frames = []
        for i, fr in enumerate(ep.frames):
            refs = {}
            for cam in sorted(fr.images):
                rel = _frame_png(i, cam)
                write_png(os.path.join(tmp, rel), fr.images[cam])
                refs[cam] = rel
            frames.append({"timestamp": float(fr.timestamp), "images": refs})
        write_tensor(os.path.join(tmp, "tensors", "actions.gstf"), ep.actions())
        for name in sorted(ep.teacher):
            write_tensor(os.path.join(tmp, "tensors", "teacher", f"{name}.gstf"), ep.teacher[name])
        if scenes is not None:
            for i, sc in enumerate(scenes):
                if sc is not None:
                    os.makedirs(os.path.join(tmp, "scenes"), exist_ok=True)
                    ply_export(sc, os.path.join(tmp, "scenes", f"{i:06d}.ply"))
        doc = {
            "schema_version": EPISODE_SCHEMA,
            "id": ep.id,
            "instruction": ep.instruction,
            "cameras": {n: c.to_dict() for n, c in ep.cameras.items()},
            "camera_order": list(ep.cameras),
            "wrist_cameras": list(ep.wrist_cameras),
            "frames": frames,
            "teacher": sorted(ep.teacher),
            "meta": ep.meta,
        }
        write_json(os.path.join(tmp, "episode.json"), doc)
        _swap_into_place(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _swap_into_place(tmp, path):
    if os.path.exists(path):
        old = tempfile.mkdtemp(prefix=".old-", dir=os.path.dirname(path))
        os.rmdir(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, path)


def _need(doc, key, where="episode.json"):
    if key not in doc:
        raise LoadError(f"{where} lacks field '{key}'", field=key)
    return doc[key]


def load_episode(path) -> Episode:
    path = os.fspath(path)
    jpath = os.path.join(path, "episode.json")
    if not os.path.isfile(jpath):
        raise LoadError(f"missing episode index {jpath}", field="episode.json")
    with open(jpath) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise LoadError(f"episode.json is not valid JSON: {e.msg}", field="episode.json") from None
    version = _need(doc, "schema_version")
    if version != EPISODE_SCHEMA:
        raise LoadError(f"episode schema version {version} is not supported (expected {EPISODE_SCHEMA})",
                        field="schema_version")
    cams_doc = _need(doc, "cameras")
    order = doc.get("camera_order", sorted(cams_doc))
    cameras = {}
    for n in order:
        if n not in cams_doc:
            raise LoadError(f"camera '{n}' is listed but not defined", field=f"cameras.{n}")
        try:
            cameras[n] = CameraModel.from_dict(cams_doc[n])
        except InvalidInputError as e:
            raise LoadError(f"camera '{n}': {e}", field=f"cameras.{n}") from None
    apath = os.path.join(path, "tensors", "actions.gstf")
    if not os.path.isfile(apath):
        raise LoadError("missing action tensor tensors/actions.gstf", field="tensors/actions.gstf")
    actions = read_tensor(apath)
    frames_doc = _need(doc, "frames")
    if actions.shape[0] != len(frames_doc):
        raise LoadError(f"action tensor has {actions.shape[0]} rows for {len(frames_doc)} frames", field="actions")
    frames = []
    for i, fd in enumerate(frames_doc):
        imgs = {}
        for cam, rel in _need(fd, "images", f"frames[{i}]").items():
            ipath = os.path.join(path, rel)
            if not os.path.isfile(ipath):
                raise LoadError(f"missing image {rel}", field=f"frames[{i}].images.{cam}")
            imgs[cam] = read_png(ipath)
        frames.append(Frame(float(_need(fd, "timestamp", f"frames[{i}]")), imgs, actions[i].copy()))
    teacher = {}
    for name in doc.get("teacher", []):
        tpath = os.path.join(path, "tensors", "teacher", f"{name}.gstf")
        if not os.path.isfile(tpath):
            raise LoadError(f"missing teacher tensor {name}", field=f"teacher.{name}")
        teacher[name] = read_tensor(tpath)
    return Episode(_need(doc, "id"), frames, _need(doc, "instruction"), cameras,
                   tuple(doc.get("wrist_cameras", ())), teacher, doc.get("meta", {}))


def load_scenes(path, n_frames):
    """Per-frame scenes from ``scenes/<frame>.ply``; None where a frame has none."""
    from .gaussians import ply_import
    out = []
    for i in range(n_frames):
        p = os.path.join(os.fspath(path), "scenes", f"{i:06d}.ply")
        out.append(ply_import(p) if os.path.isfile(p) else None)
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: str
    provenance: str = "source"
    perturbation: dict | None = None
    source_id: str | None = None

    def to_dict(self):
        d = {"id": self.id, "path": self.path, "provenance": self.provenance}
        if self.perturbation is not None:
            d["perturbation"] = self.perturbation
        if self.source_id is not None:
            d["source_id"] = self.source_id
        return d


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.provenance not in PROVENANCE:
                raise InvalidInputError(f"episode {e.id}: unknown provenance '{e.provenance}'")
            if e.id in seen:
                raise ConflictError(f"duplicate episode id '{e.id}'")
            seen.add(e.id)

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e.id for e in self.entries]

    def to_dict(self):
        return {"schema_version": self.schema_version, "episodes": [e.to_dict() for e in self.entries]}


def save_manifest(manifest: Manifest, path):
    write_json(path, manifest.to_dict())


def load_manifest(path, check_paths=True) -> Manifest:
    path = os.fspath(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise LoadError(f"missing manifest {path}", field="manifest") from None
    except json.JSONDecodeError as e:
        raise LoadError(f"manifest is not valid JSON: {e.msg}", field="manifest") from None
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA:
        raise LoadError(f"manifest schema version {version} is not supported", field="schema_version")
    entries = []
    for i, e in enumerate(doc.get("episodes", [])):
        for key in ("id", "path"):
            if key not in e:
                raise LoadError(f"manifest entry {i} lacks '{key}'", field=f"episodes[{i}].{key}")
        entries.append(ManifestEntry(e["id"], e["path"], e.get("provenance", "source"), e.get("perturbation"),
                                     e.get("source_id")))
    try:
        m = Manifest(entries, version)
    except ConflictError as err:
        raise LoadError(str(err), field="episodes.id") from None
    if check_paths:
        base = os.path.dirname(os.path.abspath(path))
        for e in entries:
            if not os.path.isdir(os.path.join(base, e.path)):
                raise LoadError(f"episode '{e.id}' references missing path {e.path}", field=e.id)
    return m
