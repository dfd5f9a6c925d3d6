"""Oracles and small utilities shared by the test modules."""

import json
import struct

import numpy as np


def central_differences(f, arr, h=1e-7):
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    num = np.zeros_like(arr)
    flat, out = arr.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return num


def relative_error(analytic, numeric):
    """Normwise relative error of one parameter group."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom


def split_container(data, magic_len=6):
    (hlen,) = struct.unpack_from("<I", data, magic_len)
    start = magic_len + 4
    return data[:magic_len], json.loads(data[start:start + hlen]), data[start + hlen:]


def join_container(magic, header, payload):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<I", len(head)) + head + payload


def rewrite_header(data, edit):
    """Apply ``edit(header)`` to a container's JSON header, keeping the payload."""
    magic, header, payload = split_container(data)
    edit(header)
    return join_container(magic, header, payload)


def naive_chain(bank, image):
    """Step-by-step chain oracle: explicit sqrt(p) x sqrt(p) reshapes and scalar loops."""
    x = [float(v) for v in np.asarray(image, dtype=np.float64).reshape(-1)]
    for space in bank.spaces:
        centered = [x[i] - space.mean[i] for i in range(len(x))]
        z = []
        for row in space.basis:
            acc = 0.0
            for a, b in zip(row, centered):
                acc += a * b
            z.append(acc)
        side = int(round(len(z) ** 0.5))
        if side * side == len(z):
            grid = [[z[r * side + c] for c in range(side)] for r in range(side)]
            z = [v for r in grid for v in r]
        x = z
    return np.array(x)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict for the terminal summary, then assert it."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
