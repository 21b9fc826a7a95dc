"""FCW1 parameter checkpoints.

Layout (little-endian)::

    b"FCW1"
    u32   manifest length in bytes
    ...   UTF-8 JSON manifest
    f64[] payloads, one per manifest entry, in manifest order

The manifest records the model spec and data/train configs needed to rebuild
the network, plus ``arrays``: a list of ``{"name", "shape"}`` entries. Model
state (weights, BN scale/shift and running statistics) is stored under its
layer names; Adam moments, when present, as ``adam.m.<i>`` / ``adam.v.<i>``
with the step count and learning rate in ``manifest["adam"]``.
"""
import json
import os
import struct
import tempfile

import numpy as np

from fcdcast.data import StructuralError, ValidationError

MAGIC = b"FCW1"


class CheckpointError(ValidationError):
    pass


def _atomic_write(path, chunks):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".fcw-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model, meta=None, optimizer_state=None):
    """Write ``model.state_dict()`` (and optionally Adam state) to ``path``.

    ``meta`` is any JSON-serializable dict (model spec, configs, ...). The
    file is written to a temporary sibling and renamed into place, so a
    crash never leaves a truncated checkpoint behind.
    """
    arrays = [(k, np.asarray(v, dtype=np.float64)) for k, v in model.state_dict().items()]
    manifest = {"meta": meta or {}, "model_config": model.config}
    if optimizer_state is not None:
        manifest["adam"] = {"eta": float(optimizer_state["eta"]), "t": int(optimizer_state["t"]),
                            "n": len(optimizer_state["m"])}
        for i, (m, v) in enumerate(zip(optimizer_state["m"], optimizer_state["v"])):
            arrays.append((f"adam.m.{i}", np.asarray(m, dtype=np.float64)))
            arrays.append((f"adam.v.{i}", np.asarray(v, dtype=np.float64)))
    manifest["arrays"] = [{"name": k, "shape": list(a.shape)} for k, a in arrays]
    blob = json.dumps(manifest, sort_keys=True, default=_json_default).encode()
    chunks = [MAGIC, struct.pack("<I", len(blob)), blob]
    chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    _atomic_write(path, chunks)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def read_checkpoint(path):
    """Return ``(manifest, arrays)`` where ``arrays`` maps names to f64 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an FCW1 checkpoint")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", raw, 4)
    try:
        manifest = json.loads(raw[8:8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    offset = 8 + n
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest, arrays


def optimizer_state_from(manifest, arrays):
    adam = manifest.get("adam")
    if adam is None:
        return None
    return {"eta": adam["eta"], "t": adam["t"],
            "m": [arrays[f"adam.m.{i}"] for i in range(adam["n"])],
            "v": [arrays[f"adam.v.{i}"] for i in range(adam["n"])]}


def load_checkpoint(path, build=None):
    """Rebuild a model from ``path``.

    ``build(meta)`` must return an untrained model of the right architecture;
    by default the :class:`~fcdcast.models.ModelSpec` stored under
    ``meta["model_spec"]`` is used. Returns ``(model, manifest, optimizer_state)``.
    """
    manifest, arrays = read_checkpoint(path)
    meta = manifest.get("meta", {})
    if build is None:
        from fcdcast.models import ModelSpec, build_model

        if "model_spec" not in meta:
            raise CheckpointError(f"{path}: no model_spec in manifest")
        model = build_model(ModelSpec.from_dict(meta["model_spec"]), np.random.default_rng(0))
    else:
        model = build(meta)
    try:
        model.load_state_dict(arrays)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    except StructuralError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, manifest, optimizer_state_from(manifest, arrays)
