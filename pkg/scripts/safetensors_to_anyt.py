"""Convert tensors from a safetensors file into the dense ANYT container.

Usage::

    python scripts/safetensors_to_anyt.py model.safetensors OUT_DIR [--name NAME ...]

Each selected 2-D tensor is written to ``OUT_DIR/<name>.anyt`` as float32.
Supported source dtypes: F32, F16, BF16, F64.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys

import numpy as np

from anyq.tensorio import write_tensor

_DTYPES = {"F32": "<f4", "F16": "<f2", "F64": "<f8"}


def read_safetensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError("file too short for a safetensors header")
    (hlen,) = struct.unpack_from("<Q", data, 0)
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    base = 8 + hlen
    out = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        start, end = info["data_offsets"]
        raw = data[base + start : base + end]
        dtype = info["dtype"]
        if dtype == "BF16":
            arr = (np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16).view(np.float32)
        elif dtype in _DTYPES:
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype])
        else:
            raise ValueError(f"{name}: unsupported dtype {dtype}")
        out[name] = arr.astype(np.float32).reshape(info["shape"])
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("src")
    p.add_argument("out_dir")
    p.add_argument("--name", action="append", help="tensor to convert (repeatable); default: all 2-D tensors")
    args = p.parse_args(argv)
    tensors = read_safetensors(args.src)
    names = args.name or [n for n, t in tensors.items() if t.ndim == 2]
    os.makedirs(args.out_dir, exist_ok=True)
    for name in names:
        if name not in tensors:
            print(f"no tensor named {name!r}", file=sys.stderr)
            return 2
        write_tensor(tensors[name], os.path.join(args.out_dir, name.replace("/", "_") + ".anyt"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
