"""Versioned binary checkpoints for denoiser parameters and Adam state.

Layout (all integers little-endian uint64):

    magic b"DPSGCKPT" | version | header_len | header (UTF-8 JSON) | float64 payload

The JSON header records architecture, optimizer scalars and the shape of
every array; the payload is the arrays' raw little-endian float64 values in
header order.
"""

import json
import struct

import numpy as np

from ..errors import RejectedInputError
from .denoiser import DenoiserParams
from .optim import AdamState

MAGIC = b"DPSGCKPT"
VERSION = 1


def save_checkpoint(path, params, state=None, extra=None):
    arrays = {"freqs": params.freqs, "theta": params.theta}
    header = {
        "image_shape": list(params.image_shape),
        "hidden": list(params.hidden),
        "num_classes": params.num_classes,
        "sigma_data": params.sigma_data,
        "extra": extra or {},
    }
    if state is not None:
        arrays["adam_m"] = state.m
        arrays["adam_v"] = state.v
        header["adam"] = {"step": state.step, "lr": state.lr, "beta1": state.beta1,
                          "beta2": state.beta2, "eps": state.eps}
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<QQ", VERSION, len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(params, state_or_None, extra)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise RejectedInputError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<QQ", data, 8)
    if version != VERSION:
        raise RejectedInputError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[24:24 + hlen].decode("utf-8"))
    offset = 24 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(data):
            raise RejectedInputError(f"{path}: truncated payload")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    params = DenoiserParams(header["image_shape"], header["hidden"], arrays["freqs"],
                            arrays["theta"], header["num_classes"], header["sigma_data"])
    state = None
    if "adam" in header:
        state = AdamState(arrays["adam_m"], arrays["adam_v"], **header["adam"])
    return params, state, header.get("extra", {})
