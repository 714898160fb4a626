"""Binary PGM masks and checkpoint bundles of named ``.ten`` tensors."""

from __future__ import annotations

import os

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes


def write_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D mask, got {img.shape}")
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(img.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace before raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"unsupported PGM magic {magic!r}")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def write_mask_pgms(prefix, yhat: np.ndarray, v: np.ndarray) -> None:
    """Pseudo labels as an 8-bit class-id PGM and a 1-bit-depth (maxval 1) PGM."""
    write_pgm(f"{prefix}.yhat.pgm", yhat, 255)
    write_pgm(f"{prefix}.v.pgm", v, 1)


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Concatenated ``.ten`` records plus ``<path>.manifest`` (name shape offset)."""
    lines, chunks, offset = [], [], 0
    for name in sorted(named):
        blob = tensor_to_bytes(named[name])
        shape = " ".join(str(d) for d in np.shape(named[name]))
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(f"{path}.manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    out = {}
    with open(f"{path}.manifest") as fh:
        for line in fh:
            if not line.strip():
                continue
            name, shape, offset = line.rstrip("\n").split("\t")
            arr, _ = tensor_from_bytes(buf, int(offset))
            expect = tuple(int(d) for d in shape.split())
            if arr.shape != expect:
                raise ValueError(f"{name}: manifest shape {expect} != stored {arr.shape}")
            out[name] = arr
    return out


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
