"""Plain-text parameter checkpoints.

Layout::

    r4d-checkpoint 1
    meta <json object>
    <name> <dim0>x<dim1>... <hex float> <hex float> ...

Values are written with ``float.hex`` so a round trip is bit-exact and the
bytes depend only on the parameter values and names (sorted).
"""

import json
import os
import tempfile

import numpy as np

MAGIC = "r4d-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_params(arrays, meta=None):
    lines = [f"{MAGIC} {VERSION}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        if " " in name:
            raise CheckpointError(f"parameter names may not contain spaces: {name!r}")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        values = " ".join(float(v).hex() for v in arr.reshape(-1))
        lines.append(f"{name} {shape} {values}".rstrip())
    return "\n".join(lines) + "\n"


def loads_params(text):
    lines = text.split("\n")
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise CheckpointError("not an r4d checkpoint")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError("malformed checkpoint header") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise CheckpointError("checkpoint truncated: missing meta line")
    try:
        meta = json.loads(lines[1][5:])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"line 2: bad meta ({exc.msg})") from None
    arrays = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) < 2:
            raise CheckpointError(f"line {lineno}: malformed parameter record")
        name, shape_s, values = parts[0], parts[1], parts[2:]
        try:
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            if len(values) != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"line {lineno}: {name} expects {np.prod(shape)} values")
            arrays[name] = np.array([float.fromhex(v) for v in values], dtype=np.float64).reshape(shape)
        except ValueError as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"line {lineno}: malformed values for {name}") from None
    return arrays, meta


def save_params(path, params, meta=None):
    """Write a ``{name: Tensor or ndarray}`` mapping to ``path`` atomically."""
    arrays = {k: getattr(v, "data", v) for k, v in params.items()}
    atomic_write_text(path, dumps_params(arrays, meta))


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        return loads_params(fh.read())
