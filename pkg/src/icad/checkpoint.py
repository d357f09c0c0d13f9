"""Binary checkpoints.

Layout (little-endian)::

    b"ICAD"  u32 version  u32 header_bytes  header (UTF-8 JSON)  tensor data

The JSON header holds the model kind, the layer list, the run configuration,
the optimizer step counter and an ordered tensor index of ``{name, shape}``.
Tensor data follows in index order as row-major float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .baselines import AutoencoderNet
from .config import RunConfig
from .network import CompletionNet, LayerSpec, validate_spec
from .optim import Adam
from .tensor import Tensor

MAGIC = b"ICAD"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, config: Optional[RunConfig] = None, optimizer: Optional[Adam] = None) -> None:
    names = model.param_names
    tensors: Dict[str, np.ndarray] = {n: model.params[n].data for n in names}
    opt_t = None
    if optimizer is not None and optimizer.state.m:
        tensors.update(optimizer.state_arrays(names))
        opt_t = optimizer.state.t
    header = {
        "kind": model.kind,
        "layers": [l.to_dict() for l in model.spec],
        "config": config.to_text() if config is not None else None,
        "optimizer": None
        if optimizer is None
        else {
            "t": opt_t or 0,
            "lr": optimizer.state.lr,
            "beta1": optimizer.state.beta1,
            "beta2": optimizer.state.beta2,
            "eps": optimizer.state.eps,
        },
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors.items()],
    }
    if model.kind == "autoencoder":
        header["autoencoder"] = {"code_size": model.code_size, "patch_size": model.patch_size}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for a in tensors.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[object, Optional[RunConfig], Optional[dict]]:
    """Return (model, config, optimizer) where optimizer is a dict of state or None."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an ICAD checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    offset = _PREFIX.size + hlen
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    params = {n: Tensor(a, requires_grad=True) for n, a in arrays.items() if not n.startswith("adam.")}
    if header["kind"] == "completion":
        spec = [LayerSpec.from_dict(d) for d in header["layers"]]
        validate_spec(spec)
        model = CompletionNet(spec, params)
    elif header["kind"] == "autoencoder":
        ae = header.get("autoencoder", {})
        model = AutoencoderNet(params, **ae)
    else:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    config = RunConfig.from_text(header["config"]) if header.get("config") else None
    opt = None
    if header.get("optimizer") is not None:
        opt = dict(header["optimizer"])
        opt["arrays"] = {n: a for n, a in arrays.items() if n.startswith("adam.")}
    return model, config, opt
