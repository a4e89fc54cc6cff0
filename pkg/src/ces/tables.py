"""Self-describing columnar text artifacts and checksum helpers.

Every numeric artifact is a whitespace-separated table whose first line names
the columns. Floats are written as %.17e, which round-trips IEEE doubles
exactly, so a stage rerun that reads persisted values computes with the same
bits as the run that wrote them. Integer-valued columns (indices, seeds) must
stay below 2^53 to survive the float path; seeds are drawn as 32-bit values
for that reason.
"""

import hashlib
import json

import numpy as np

from .exceptions import ConfigError


def write_table(path, columns, arrays):
    """Write named columns (equal-length 1-D arrays) as headered text."""
    arrays = [np.asarray(a) for a in arrays]
    if len(columns) != len(arrays):
        raise ConfigError("one name per column required")
    n = len(arrays[0]) if arrays else 0
    if any(a.ndim != 1 or len(a) != n for a in arrays):
        raise ConfigError("columns must be 1-D and equal length")
    if any(" " in str(c) for c in columns):
        raise ConfigError("column names must not contain spaces")
    with open(path, "w") as fh:
        fh.write(" ".join(str(c) for c in columns) + "\n")
        for i in range(n):
            cells = []
            for a in arrays:
                v = a[i]
                if isinstance(v, (str, np.str_)):
                    cells.append(str(v))
                else:
                    cells.append("%.17e" % float(v))
            fh.write(" ".join(cells) + "\n")


def read_table(path):
    """Read a headered table; returns dict of column name -> array.

    Columns parse as float64 when every cell is numeric, otherwise as strings.
    """
    with open(path) as fh:
        header = fh.readline().split()
        rows = [line.split() for line in fh if line.strip()]
    if any(len(r) != len(header) for r in rows):
        raise ConfigError(f"{path}: ragged rows do not match header {header}")
    out = {}
    for j, name in enumerate(header):
        cells = [r[j] for r in rows]
        try:
            out[name] = np.array([float(c) for c in cells])
        except ValueError:
            out[name] = np.array(cells, dtype=object)
    return out


def write_matrix(path, matrix, column_prefix="c"):
    """Write a 2-D array with generated column names (prefix0, prefix1, ...)."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    names = [f"{column_prefix}{j}" for j in range(matrix.shape[1])]
    write_table(path, names, list(matrix.T))


def read_matrix(path):
    cols = read_table(path)
    return np.column_stack([cols[k] for k in cols]) if cols else np.empty((0, 0))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    # Sorted keys and a fixed layout keep reruns byte-identical.
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
