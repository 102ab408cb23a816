"""MKVG little-endian binary format for grid measures, flows and kernels.

Layout::

    magic   4 bytes  b"MKVG"
    version u32      1 = single grid, 2 = kernel grid, 3 = measure flow
    d       u32
    cells   u32 * d
    lo      f64 * d
    hi      f64 * d
    [v2]    s f64, n_t u32, t_nodes f64*n_t, n_x u32, x_nodes f64*(n_x*d)
    [v3]    n_t u32, t_nodes f64*n_t
    values  f64, row-major (v1: cells; v2: n_x, n_t, cells; v3: n_t, cells)
"""
import struct

import numpy as np

from .errors import InvalidMeasure
from .measures import Measure, MeasureFlow

MAGIC = b"MKVG"
V_GRID, V_KERNEL, V_FLOW = 1, 2, 3


def _header(version, lo, hi, cells):
    d = len(cells)
    out = MAGIC + struct.pack("<II", version, d)
    out += struct.pack(f"<{d}I", *cells)
    out += struct.pack(f"<{d}d", *lo) + struct.pack(f"<{d}d", *hi)
    return out


def _read_header(buf):
    if buf[:4] != MAGIC:
        raise InvalidMeasure("not an MKVG file")
    version, d = struct.unpack_from("<II", buf, 4)
    off = 12
    cells = struct.unpack_from(f"<{d}I", buf, off)
    off += 4 * d
    lo = struct.unpack_from(f"<{d}d", buf, off)
    off += 8 * d
    hi = struct.unpack_from(f"<{d}d", buf, off)
    off += 8 * d
    return version, d, tuple(cells), np.array(lo), np.array(hi), off


def _values(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_measure(path, m):
    if m.kind != "grid":
        raise InvalidMeasure("only grid measures serialize to MKVG")
    with open(path, "wb") as fh:
        fh.write(_header(V_GRID, m.lo, m.hi, m.cells) + _values(m.values))


def write_flow(path, flow):
    m0 = flow.measures[0]
    if m0.kind != "grid":
        raise InvalidMeasure("only grid flows serialize to MKVG")
    body = struct.pack("<I", len(flow.times)) + _values(flow.times)
    vals = np.stack([m.values for m in flow.measures])
    with open(path, "wb") as fh:
        fh.write(_header(V_FLOW, m0.lo, m0.hi, m0.cells) + body + _values(vals))


def write_kernel(path, kernel):
    """Any object with s, t_nodes, x_nodes, y_box = (lo, hi, cells) and values;
    y_box entries may be scalars (d = 1) or per-axis sequences."""
    lo, hi, cells = (np.atleast_1d(np.asarray(v, float)) for v in kernel.y_box)
    cells = tuple(int(c) for c in cells)
    t_nodes = np.asarray(kernel.t_nodes, float)
    xn = np.asarray(kernel.x_nodes, float).reshape(-1, len(cells))
    if len(xn) != np.shape(kernel.values)[0]:
        raise InvalidMeasure("only point-started kernels serialize to MKVG")
    vals = np.asarray(kernel.values, float).reshape(len(xn), len(t_nodes), -1)
    body = struct.pack("<d", float(kernel.s))
    body += struct.pack("<I", len(t_nodes)) + _values(t_nodes)
    body += struct.pack("<I", len(xn)) + _values(xn)
    with open(path, "wb") as fh:
        fh.write(_header(V_KERNEL, lo, hi, cells) + body + _values(vals))


def read(path):
    """Returns a Measure (v1), a MeasureFlow (v3) or a dict of kernel arrays (v2)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    version, d, cells, lo, hi, off = _read_header(buf)
    ncell = int(np.prod(cells))
    if version == V_GRID:
        vals = np.frombuffer(buf, "<f8", ncell, off)
        return Measure.grid(lo, hi, cells, vals.copy())
    if version == V_FLOW:
        (nt,) = struct.unpack_from("<I", buf, off)
        off += 4
        times = np.frombuffer(buf, "<f8", nt, off).copy()
        off += 8 * nt
        vals = np.frombuffer(buf, "<f8", nt * ncell, off).reshape((nt,) + cells)
        return MeasureFlow(times, [Measure.grid(lo, hi, cells, v.copy()) for v in vals])
    if version == V_KERNEL:
        (s,) = struct.unpack_from("<d", buf, off)
        off += 8
        (nt,) = struct.unpack_from("<I", buf, off)
        off += 4
        t_nodes = np.frombuffer(buf, "<f8", nt, off).copy()
        off += 8 * nt
        (nx,) = struct.unpack_from("<I", buf, off)
        off += 4
        x_nodes = np.frombuffer(buf, "<f8", nx * d, off).reshape(nx, d).copy()
        off += 8 * nx * d
        vals = np.frombuffer(buf, "<f8", nx * nt * ncell, off).reshape((nx, nt, ncell)).copy()
        return {"version": version, "d": d, "cells": cells, "lo": lo, "hi": hi, "s": s,
                "t_nodes": t_nodes, "x_nodes": x_nodes, "values": vals}
    raise InvalidMeasure(f"unknown MKVG version {version}")


def write_grid_csv(path, m):
    """One row per cell: center coordinates then value."""
    from .jsonio import write_csv
    pts = m.centers()
    header = [f"x{k}" for k in range(m.dim)] + ["value"]
    write_csv(path, header, ([*map(float, p), float(v)] for p, v in zip(pts, m.values.ravel())))
