"""Checkpoint archives: a JSON manifest plus raw little-endian, row-major tensor buffers.

The archive is a zip file with fixed timestamps (so identical tensors give
identical bytes) holding ``manifest.json`` and ``tensors.bin``.
"""
import io
import json
import zipfile
from collections import OrderedDict

import numpy as np
import torch

FORMAT = "aunet-checkpoint/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None):
    """Write an ordered mapping ``name -> tensor`` (e.g. a ``state_dict``)."""
    manifest, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes(order="C")
        manifest.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    doc = {"format": FORMAT, "tensors": manifest, "meta": meta or {}}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), json.dumps(doc, indent=1, sort_keys=True))
        zf.writestr(zipfile.ZipInfo("tensors.bin", _EPOCH), b"".join(blobs))


def load_checkpoint(path):
    """Return ``(OrderedDict name -> tensor, meta)``."""
    try:
        with zipfile.ZipFile(path) as zf:
            doc = json.loads(zf.read("manifest.json"))
            data = zf.read("tensors.bin")
    except (OSError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    out = OrderedDict()
    for entry in doc["tensors"]:
        buf = data[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out, doc.get("meta", {})


def save_model(path, model, meta=None):
    save_checkpoint(path, model.state_dict(), meta)


def load_model_state(model, path, prefix=None):
    """Copy checkpoint tensors into ``model`` (only names starting with ``prefix`` when given).

    Every selected checkpoint entry must exist in the model with the same shape;
    the copy is bit-exact (tensors are cast only if the model runs at another precision).
    """
    tensors, meta = load_checkpoint(path)
    state = model.state_dict()
    selected = [n for n in tensors if prefix is None or n.startswith(prefix)]
    if not selected:
        raise CheckpointError(f"{path}: no tensors match prefix {prefix!r}")
    for name in selected:
        if name not in state:
            raise CheckpointError(f"{path}: parameter {name!r} does not exist in the model")
        if tuple(state[name].shape) != tuple(tensors[name].shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: checkpoint {tuple(tensors[name].shape)} "
                f"vs model {tuple(state[name].shape)}")
    if prefix is None:
        missing = [n for n in state if n not in tensors]
        if missing:
            raise CheckpointError(f"{path}: checkpoint lacks {missing[:5]}{'...' if len(missing) > 5 else ''}")
    with torch.no_grad():
        for name in selected:
            state[name].copy_(tensors[name].to(state[name].dtype))
    return meta


def checkpoint_bytes(tensors, meta=None):
    """Archive bytes for ``tensors`` (handy for comparing checkpoints in memory)."""
    bio = io.BytesIO()
    save_checkpoint(bio, tensors, meta)
    return bio.getvalue()
