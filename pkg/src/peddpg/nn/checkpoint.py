"""Binary checkpoint container.

Layout (little-endian)::

    b"PEDDPGCK" | u32 version | u64 header length | JSON header | array bytes

The JSON header (sorted keys) holds network layer specs, optional
metadata, and an index of the arrays that follow (name, dtype, shape,
byte offset).  Arrays appear in declaration order: each network's free
blocks, then each optimizer's Adam moments.  Nothing time- or
path-dependent is written, so saving the same objects twice gives the
same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from peddpg.nn.network import Network
from peddpg.nn.optim import Adam

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"PEDDPGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, networks: dict[str, Network], optimizers: dict[str, Adam] | None = None, meta=None):
    optimizers = optimizers or {}
    arrays: list[tuple[str, np.ndarray]] = []
    nets_header = {}
    for name, net in networks.items():
        nets_header[name] = {"dtype": net.dtype.str, "layers": net.spec()}
        for key, layer, pname in net.named_params():
            arrays.append((f"net/{name}/{key}", layer.params[pname]))
    opt_header = {}
    for name, opt in optimizers.items():
        opt_header[name] = {"t": opt.t, "lr": opt.lr, "weight_decay": opt.weight_decay}
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays.append((f"opt/{name}/m/{i}", m))
            arrays.append((f"opt/{name}/v/{i}", v))

    index = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(le.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "version": FORMAT_VERSION,
        "networks": nets_header,
        "optimizers": opt_header,
        "arrays": index,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(networks, optimizer_states, meta)``.

    Optimizer states are dicts accepted by ``Adam.load_state``.
    """
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    body = memoryview(data)[start + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=count, offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))

    networks = {}
    for name, nh in header["networks"].items():
        net = Network.from_spec(nh["layers"], dtype=np.dtype(nh["dtype"]))
        for key, layer, pname in net.named_params():
            src = arrays[f"net/{name}/{key}"]
            if src.shape != layer.params[pname].shape:
                raise CheckpointError(f"{name}/{key}: shape {src.shape} != {layer.params[pname].shape}")
            layer.params[pname] = src.copy()
        networks[name] = net

    opt_states = {}
    for name, oh in header["optimizers"].items():
        n = sum(1 for k in arrays if k.startswith(f"opt/{name}/m/"))
        opt_states[name] = {
            "t": oh["t"],
            "lr": oh["lr"],
            "weight_decay": oh["weight_decay"],
            "m": [arrays[f"opt/{name}/m/{i}"] for i in range(n)],
            "v": [arrays[f"opt/{name}/v/{i}"] for i in range(n)],
        }
    return networks, opt_states, header["meta"]
