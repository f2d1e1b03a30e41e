"""Binary field dumps (FGAF) and trajectory CSV output.

Layout of an FGAF file, all integers little-endian ``u32``::

    b"FGAF" | version=1 | d | N | counts[d] | [k | n] | complex128 samples (re, im)

The optional ``k`` (expansion order) and ``n`` (branch) words mark a symbol
field; readers tell the two variants apart from the remaining byte count.
Samples are row-major over the grid with the component index last. Symbol
fields store ``N*N`` components per node.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ._validation import DataError

MAGIC = b"FGAF"
VERSION = 1


def write_fgaf(path, values: np.ndarray, counts, *, order: int | None = None, branch: int | None = None) -> None:
    """Write complex samples with grid ``counts``; trailing axes are flattened into N."""
    values = np.ascontiguousarray(values, dtype=np.complex128)
    counts = tuple(int(c) for c in counts)
    d = len(counts)
    n_comp = int(np.prod(values.shape[d:])) if values.ndim > d else 1
    if values.shape[:d] != counts:
        raise DataError(f"values shape {values.shape} does not start with counts {counts}")
    header = MAGIC + struct.pack(f"<{3 + d}I", VERSION, d, n_comp, *counts)
    if (order is None) != (branch is None):
        raise ValueError("order and branch must be given together")
    if order is not None:
        header += struct.pack("<2I", int(order), int(branch))
    payload = values.reshape(-1).view(np.float64).astype("<f8", copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_fgaf(path) -> dict:
    """Read an FGAF dump; returns ``values`` (counts + (N,)) and header fields."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError("not an FGAF file")
    version, d, n_comp = struct.unpack_from("<3I", raw, 4)
    if version != VERSION:
        raise DataError(f"unsupported FGAF version {version}")
    off = 16
    counts = struct.unpack_from(f"<{d}I", raw, off)
    off += 4 * d
    n_samples = int(np.prod(counts)) * n_comp
    body = len(raw) - off
    order = branch = None
    if body == 16 * n_samples + 8:
        order, branch = struct.unpack_from("<2I", raw, off)
        off += 8
    elif body != 16 * n_samples:
        raise DataError("FGAF payload size does not match header")
    data = np.frombuffer(raw, dtype="<f8", offset=off, count=2 * n_samples)
    values = data.view(np.complex128).reshape(tuple(counts) + (n_comp,))
    return {"d": d, "N": n_comp, "counts": tuple(counts), "values": values.copy(), "order": order, "branch": branch}


def write_wavefield(path, field) -> None:
    write_fgaf(path, field.values, field.grid.n_per_dim)


def write_trajectory_csv(path, times, Q, P, S, Z, symplectic_residual) -> None:
    """One row per (time, trajectory) with center, action, Z entries and residual.

    Array arguments carry a leading time axis: ``Q[t_index, m, :]`` etc.
    """
    Q = np.asarray(Q)
    n_t, M, d = Q.shape
    cols = ["t", "node"] + [f"Q_{i + 1}" for i in range(d)] + [f"P_{i + 1}" for i in range(d)] + ["S"]
    for a in range(d):
        for b in range(d):
            cols += [f"re_Z_{a + 1}{b + 1}", f"im_Z_{a + 1}{b + 1}"]
    cols.append("symplectic_residual")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for it in range(n_t):
            for m in range(M):
                row = [repr(float(times[it])), str(m)]
                row += [repr(float(v)) for v in Q[it, m]]
                row += [repr(float(v)) for v in P[it, m]]
                row.append(repr(float(S[it, m])))
                for z in np.asarray(Z[it, m]).reshape(-1):
                    row += [repr(float(z.real)), repr(float(z.imag))]
                row.append(repr(float(symplectic_residual[it, m])))
                fh.write(",".join(row) + "\n")
