"""Dataset container, CSV helpers and run manifests.

Dataset layout: ``b"NODS" | u32 version | u64 header length | UTF-8 JSON
header | inputs [N x steps] | targets [N x q x steps]``, all integers and
floats little-endian.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MAGIC = b"NODS"
VERSION = 1
RESPONSE = "response"
EXTREME = "extreme"
_F64 = np.dtype("<f8")


@dataclass
class Dataset:
    header: dict
    inputs: np.ndarray      # (N, steps)
    targets: np.ndarray     # (N, q, steps)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        h = self.header
        for key in ("dt", "T", "N", "q", "p", "seed", "target_kind", "channel"):
            if key not in h:
                raise ValidationError(f"dataset header lacks {key!r}")
        n, steps = self.inputs.shape
        if self.targets.shape != (n, h["q"], steps) or h["N"] != n or h["p"] != 1:
            raise ValidationError(
                f"payload shapes {self.inputs.shape}/{self.targets.shape} disagree with header")
        if abs(h["dt"] * (steps - 1) - h["T"]) > 1e-9:
            raise ValidationError(f"dt*(steps-1) = {h['dt'] * (steps - 1)} != T = {h['T']}")
        if h["target_kind"] not in (RESPONSE, EXTREME):
            raise ValidationError(f"unknown target kind {h['target_kind']!r}")

    @property
    def steps(self):
        return self.inputs.shape[1]

    def subset(self, start, stop):
        h = dict(self.header, N=stop - start, index_start=self.header.get("index_start", 0) + start)
        return Dataset(h, self.inputs[start:stop], self.targets[start:stop])

    def truncate(self, steps):
        """Leading ``steps`` grid points of every series."""
        if not 1 <= steps <= self.steps:
            raise ValidationError(f"cannot truncate {self.steps} steps to {steps}")
        h = dict(self.header, T=self.header["dt"] * (steps - 1))
        return Dataset(h, self.inputs[:, :steps], self.targets[:, :, :steps])


def dataset_bytes(ds):
    head = json.dumps(dict(ds.header, version=VERSION), sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(head)), head,
                     ds.inputs.astype(_F64).tobytes(), ds.targets.astype(_F64).tobytes()])


def write_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_from_bytes(blob):
    if blob[:4] != MAGIC:
        raise ValidationError("not a dataset file (bad magic)")
    version, n = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise ValidationError(f"unsupported dataset version {version}")
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    header.pop("version", None)
    payload = np.frombuffer(blob, dtype=_F64, offset=16 + n)
    N, q = header["N"], header["q"]
    steps = int(round(header["T"] / header["dt"])) + 1
    if payload.size != N * steps * (1 + q):
        raise ValidationError("dataset payload size does not match header")
    inputs = payload[:N * steps].reshape(N, steps).copy()
    targets = payload[N * steps:].reshape(N, q, steps).copy()
    return Dataset(header, inputs, targets)


def read_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def manifest(command, config, seeds, outputs, extra=None):
    """Run manifest: everything needed to trace an artifact, no timestamps."""
    from . import __version__
    return {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "outputs": sorted(outputs),
        "versions": {"neuralosc": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        **({"extra": extra} if extra else {}),
    }


def write_manifest(path, man):
    with open(path, "w") as fh:
        json.dump(man, fh, sort_keys=True, indent=2)
        fh.write("\n")
