"""Byte-stable array containers and atomic output helpers."""
from __future__ import annotations

import contextlib
import io
import json
import os
import shutil
import tempfile
import zipfile

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: str, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays (``.npy`` members) plus a JSON ``meta`` member into a zip.

    Members are sorted and carry a fixed timestamp, so identical inputs give
    identical bytes.
    """
    meta = dict(meta or {})
    meta.setdefault("format_version", FORMAT_VERSION)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=_EPOCH), json.dumps(meta, sort_keys=True, indent=1))


def load_arrays(path: str) -> tuple[dict, dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {meta.get('format_version')!r}")
    return arrays, meta


@contextlib.contextmanager
def atomic_dir(path: str):
    """Yield a scratch directory that replaces ``path`` only if the block succeeds."""
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if os.path.isdir(path):
        shutil.rmtree(path)
    elif os.path.exists(path):
        os.remove(path)
    os.replace(tmp, path)


@contextlib.contextmanager
def atomic_file(path: str, mode: str = "w"):
    """Open a temporary sibling of ``path``; rename it into place on success."""
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=parent)
    os.close(fd)
    try:
        with open(tmp, mode, newline="" if "b" not in mode else None) as fh:
            yield fh
    except BaseException:
        os.remove(tmp)
        raise
    os.replace(tmp, path)
