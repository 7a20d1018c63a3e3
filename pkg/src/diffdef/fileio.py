"""File formats: .field images, training checkpoints, cohort directories,
and run manifests.

A .field file is one JSON header line (utf-8, ending in a newline) followed
by the raw little-endian blob in C order. Scalars and displacements are f32,
labels u8; in-memory arrays are wider, so writing narrows and a write/read
round trip of an already-written file is bit-exact. Checkpoints use the same
header-plus-blob layout with every parameter concatenated in name order.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time

import numpy as np

from . import diffusion
from .atlas import Cohort, DiffDefConfig, DiffDefModel, Subject
from .engine import ParamStore
from .errors import ArgumentError, FormatError, UnsupportedFormatError
from .fields import DisplacementField, Grid, LabelField, ScalarField

FIELD_VERSION = 1
CKPT_FORMAT = "diffdef-ckpt"
CKPT_VERSION = 1

_KIND_BY_TYPE = {ScalarField: "scalar", DisplacementField: "displacement",
                 LabelField: "label"}
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_field(path, field):
    kind = _KIND_BY_TYPE.get(type(field))
    if kind is None:
        raise ArgumentError(f"cannot write object of type {type(field).__name__}")
    if kind == "label":
        blob = field.labels.astype("u1")
        dtype = "u8"
    else:
        data = field.vectors if kind == "displacement" else field.values
        blob = data.astype("<f4")
        dtype = "f32"
    header = {"kind": kind, "dim": field.grid.dim, "shape": list(field.grid.shape),
              "spacing": list(field.grid.spacing), "dtype": dtype, "order": "C",
              "version": FIELD_VERSION}
    payload = (json.dumps(header) + "\n").encode() + np.ascontiguousarray(blob).tobytes()
    _atomic_write(path, payload)


def read_field(path):
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        off = getattr(e, "pos", None)
        raise FormatError(f"malformed header: {e}", offset=off if off is not None else 0)
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", offset=0)
    for key in ("kind", "shape", "dtype"):
        if key not in header:
            raise FormatError(f"header missing {key!r}", offset=0)
    kind, dtype_name = header["kind"], header["dtype"]
    if header.get("version", FIELD_VERSION) != FIELD_VERSION:
        raise UnsupportedFormatError(f"field version {header.get('version')}")
    if kind not in ("scalar", "displacement", "label"):
        raise UnsupportedFormatError(f"unknown kind {kind!r}")
    if dtype_name not in _DTYPES:
        raise UnsupportedFormatError(f"unknown dtype {dtype_name!r}")
    if kind == "label" and dtype_name != "u8" or kind != "label" and dtype_name != "f32":
        raise UnsupportedFormatError(f"kind {kind!r} cannot carry dtype {dtype_name!r}")
    shape = tuple(int(s) for s in header["shape"])
    spacing = tuple(float(s) for s in header.get("spacing", [1.0] * len(shape)))
    grid = Grid(shape, spacing)
    dt = _DTYPES[dtype_name]
    count = grid.num_voxels * (grid.dim if kind == "displacement" else 1)
    expected = count * dt.itemsize
    blob = raw[nl + 1:]
    if len(blob) != expected:
        raise FormatError(
            f"blob length mismatch: expected {expected} bytes, got {len(blob)}",
            offset=nl + 1)
    arr = np.frombuffer(blob, dtype=dt)
    if kind == "scalar":
        return ScalarField(grid, arr.astype(np.float64).reshape(shape))
    if kind == "label":
        return LabelField(grid, arr.reshape(shape).copy())
    return DisplacementField(grid, arr.astype(np.float64).reshape(shape + (grid.dim,)))


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, meta=None):
    names = list(params.names())
    arrays = [params[n].data for n in names]
    header = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "dtype": "f32",
              "names": names, "shapes": [list(a.shape) for a in arrays],
              "meta": dict(params.meta, **(meta or {}))}
    blobs = b"".join(np.ascontiguousarray(a.astype("<f4")).tobytes() for a in arrays)
    _atomic_write(path, (json.dumps(header) + "\n").encode() + blobs)


def load_checkpoint(path):
    """Returns (ParamStore, meta dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed header: {e}", offset=0)
    if header.get("format") != CKPT_FORMAT:
        raise UnsupportedFormatError(f"not a checkpoint file: {header.get('format')!r}")
    if header.get("version") != CKPT_VERSION or header.get("dtype") != "f32":
        raise UnsupportedFormatError("unsupported checkpoint version/dtype")
    names, shapes = header["names"], header["shapes"]
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    blob = raw[nl + 1:]
    if len(blob) != expected:
        raise FormatError(
            f"blob length mismatch: expected {expected} bytes, got {len(blob)}",
            offset=nl + 1)
    params = ParamStore()
    offset = 0
    for name, shape in zip(names, shapes):
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[offset:offset + size], dtype="<f4")
        params.add(name, arr.astype(np.float64).reshape(shape))
        offset += size
    params.meta.update(header.get("meta", {}))
    return params, header.get("meta", {})


def save_model(path, model: DiffDefModel):
    """One file carrying the diffusion params, the frozen regnet, and the
    inference-time scalars."""
    combined = ParamStore()
    for n in model.params.names():
        combined.add(n, model.params[n].data)
    reg_names = []
    if isinstance(model.regnet, ParamStore):
        for n in model.regnet.names():
            combined.add("frozenreg." + n, model.regnet[n].data)
            reg_names.append(n)
    meta = {
        "kind": "diffdef-model",
        "cfg": vars(model.cfg),
        "sched": {"T": model.sched.T,
                  "beta_start": float(model.sched.beta[0]),
                  "beta_end": float(model.sched.beta[-1])},
        "grid_shape": list(model.grid.shape),
        "grid_spacing": list(model.grid.spacing),
        "latent_shape": list(model.latent_shape),
        "latent_mean": model.latent_mean,
        "latent_std": model.latent_std,
        "curve": model.curve,
        "regnet_names": reg_names,
        "ae_meta": dict(model.params.meta),
    }
    save_checkpoint(path, combined, meta=meta)


def load_model(path) -> DiffDefModel:
    combined, meta = load_checkpoint(path)
    if meta.get("kind") != "diffdef-model":
        raise UnsupportedFormatError("checkpoint does not hold a trained model")
    params, regnet = ParamStore(), ParamStore()
    for n in combined.names():
        if n.startswith("frozenreg."):
            regnet.add(n[len("frozenreg."):], combined[n].data)
        else:
            params.add(n, combined[n].data)
    params.meta.update(meta.get("ae_meta", {}))
    sched = diffusion.build_schedule(meta["sched"]["T"], meta["sched"]["beta_start"],
                                     meta["sched"]["beta_end"])
    return DiffDefModel(
        params=params, regnet=regnet, sched=sched,
        cfg=DiffDefConfig(**meta["cfg"]),
        grid=Grid(tuple(meta["grid_shape"]), tuple(meta["grid_spacing"])),
        latent_shape=tuple(meta["latent_shape"]),
        latent_mean=float(meta["latent_mean"]),
        latent_std=float(meta["latent_std"]),
        curve=meta.get("curve", {}),
    )


# -- cohorts ------------------------------------------------------------------

def save_cohort(directory, cohort: Cohort):
    os.makedirs(directory, exist_ok=True)
    conditions = []
    for i, s in enumerate(cohort.subjects):
        write_field(os.path.join(directory, f"subj_{i:04d}.image.field"), s.image)
        write_field(os.path.join(directory, f"subj_{i:04d}.labels.field"), s.labels)
        conditions.append(s.condition)
    manifest = {"n": len(cohort), "conditions": conditions,
                "grid_shape": list(cohort.grid.shape),
                "grid_spacing": list(cohort.grid.spacing),
                "metadata": cohort.metadata}
    _atomic_write(os.path.join(directory, "cohort.json"),
                  json.dumps(manifest, indent=1).encode())


def load_cohort(directory) -> Cohort:
    with open(os.path.join(directory, "cohort.json")) as f:
        manifest = json.load(f)
    grid = Grid(tuple(manifest["grid_shape"]), tuple(manifest["grid_spacing"]))
    subjects = []
    for i, c in enumerate(manifest["conditions"]):
        image = read_field(os.path.join(directory, f"subj_{i:04d}.image.field"))
        labels = read_field(os.path.join(directory, f"subj_{i:04d}.labels.field"))
        subjects.append(Subject(image=image, labels=labels, condition=float(c)))
    return Cohort(subjects=subjects, grid=grid, metadata=manifest.get("metadata", {}))


# -- run manifests ------------------------------------------------------------

def write_manifest(path, argv, config_snapshot, seeds, outputs, timings=None):
    """Reproducibility record: exact invocation, config, seeds, and a sha256
    digest of every output file."""
    from . import __version__
    manifest = {
        "argv": list(argv),
        "version": __version__,
        "config": config_snapshot,
        "seeds": seeds,
        "timings_sec": timings or {},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": {os.path.basename(p): _file_digest(p) for p in outputs
                    if os.path.exists(p)},
    }
    _atomic_write(path, json.dumps(manifest, indent=1).encode())
    return manifest
