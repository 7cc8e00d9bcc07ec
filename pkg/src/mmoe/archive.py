"""Binary ensemble archive.

Layout (little-endian)::

    b"MMOE" | u32 version | u32 bytes-per-value | u32 meta length | meta (JSON, UTF-8)
    | parameter payload | sha256 of everything before it (32 bytes)

The shared prefix is written once under ``shared/`` and re-linked by reference
on load, so experts and mediator keep pointing at the same arrays.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .builder import EnsembleConfig
from .gating import GatingConfig
from .nn import Network, format_layers, param_shapes, parse_layers
from .partition import SuperclassMap
from .training import Ensemble, Expert

MAGIC = b"MMOE"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ArchiveError(ValueError):
    pass


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    pass


class MissingBlobError(ArchiveError):
    pass


def _net_meta(net: Network) -> dict:
    return {"layers": format_layers(net.spec), "input_shape": list(net.input_shape), "frozen": net.frozen}


def dumps(ensemble: Ensemble) -> bytes:
    dtype = np.dtype(ensemble.mediator.dtype)
    le = _DTYPES[dtype.itemsize]
    cfg = ensemble.config
    prefix = cfg.prefix_len
    blobs, chunks, offset = [], [], 0

    def add(name, array):
        nonlocal offset
        data = np.ascontiguousarray(array, dtype=le).tobytes()
        blobs.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    def add_net(tag, net, skip):
        for i, p in enumerate(net.params):
            if p is None or i < skip:
                continue
            for key in ("W", "b"):
                add(f"{tag}/L{i}/{key}", p[key])

    for i, p in enumerate(ensemble.shared_params):
        if p is not None:
            for key in ("W", "b"):
                add(f"shared/L{i}/{key}", p[key])
    add_net("mediator", ensemble.mediator, prefix)
    experts = []
    for e, expert in enumerate(ensemble.experts):
        add_net(f"expert{e}", expert.net, prefix)
        if expert.head is not None:
            add_net(f"expert{e}/head", expert.head, 0)
        experts.append({"net": _net_meta(expert.net),
                        "head": None if expert.head is None else _net_meta(expert.head),
                        "local_to_global": list(expert.local_to_global)})

    meta = {
        "config": {
            "layers": format_layers(cfg.base_spec),
            "input_shape": list(cfg.input_shape),
            "n_experts": cfg.n_experts,
            "shared_layers": cfg.shared_layers,
            "confidence_layer": cfg.confidence_layer,
            "expert_head_width": cfg.expert_head_width,
            "mediator_head_width": cfg.mediator_head_width,
            "expert_init": cfg.expert_init,
        },
        "partition": [list(g) for g in ensemble.partition.members],
        "gating": {"threshold": ensemble.gating.threshold,
                   "mediator_weight": ensemble.gating.mediator_weight},
        "mediator": _net_meta(ensemble.mediator),
        "experts": experts,
        "blobs": blobs,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<III", VERSION, dtype.itemsize, len(meta_bytes)) + meta_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(raw: bytes, dtype=None) -> Ensemble:
    """Parse an archive. ``dtype`` may widen the stored precision (e.g. to float64)."""
    if raw[:4] != MAGIC:
        raise BadMagicError("not an MMOE archive")
    if len(raw) < 16 + 32:
        raise ArchiveError("archive truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("archive checksum mismatch")
    version, itemsize, meta_len = struct.unpack("<III", body[4:16])
    if version != VERSION:
        raise UnsupportedVersionError(f"archive version {version}, this build reads {VERSION}")
    if itemsize not in _DTYPES:
        raise ArchiveError(f"unknown precision tag {itemsize}")
    meta = json.loads(body[16:16 + meta_len].decode("utf-8"))
    payload = memoryview(body)[16 + meta_len:]
    stored = _DTYPES[itemsize]
    target = np.dtype(dtype or stored.newbyteorder("="))
    index = {b["name"]: b for b in meta["blobs"]}

    def blob(name):
        if name not in index:
            raise MissingBlobError(f"blob {name!r} missing from archive")
        b = index[name]
        count = int(np.prod(b["shape"]))
        arr = np.frombuffer(payload, dtype=stored, count=count, offset=b["offset"])
        return arr.astype(target).reshape(b["shape"])

    c = meta["config"]
    config = EnsembleConfig(tuple(parse_layers(c["layers"])), tuple(c["input_shape"]), c["n_experts"],
                            c["shared_layers"], c["confidence_layer"], c["expert_head_width"],
                            c["mediator_head_width"], c["expert_init"])
    prefix = config.prefix_len
    shared = {}

    def build(tag, net_meta, skip):
        spec = parse_layers(net_meta["layers"])
        tmp = Network.build(spec, tuple(net_meta["input_shape"]), dtype=target.type)
        params = []
        for i, layer in enumerate(tmp.spec):
            if param_shapes(layer) is None:
                params.append(None)
            elif i < skip:
                if i not in shared:
                    shared[i] = {k: blob(f"shared/L{i}/{k}") for k in ("W", "b")}
                params.append(shared[i])
            else:
                params.append({k: blob(f"{tag}/L{i}/{k}") for k in ("W", "b")})
        return Network(tmp.spec, tmp.input_shape, params, list(net_meta["frozen"]), target.type)

    mediator = build("mediator", meta["mediator"], prefix)
    experts = []
    for e, em in enumerate(meta["experts"]):
        net = build(f"expert{e}", em["net"], prefix)
        head = None if em["head"] is None else build(f"expert{e}/head", em["head"], 0)
        experts.append(Expert(net, head, tuple(em["local_to_global"])))
    return Ensemble(config, SuperclassMap(tuple(tuple(g) for g in meta["partition"])), mediator, experts,
                    GatingConfig(meta["gating"]["threshold"], meta["gating"]["mediator_weight"]))


def save_model(ensemble: Ensemble, path) -> None:
    Path(path).write_bytes(dumps(ensemble))


def load_model(path, dtype=None) -> Ensemble:
    return loads(Path(path).read_bytes(), dtype)
