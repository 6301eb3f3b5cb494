"""Byte-deterministic ``.npz`` archives with a declared format name and version.

``numpy.savez`` stamps the current time into every zip entry, so two runs on the
same data produce different bytes. The writer below fixes the timestamps and
entry order so output hashes only depend on the array contents.
"""

from __future__ import annotations

import io
import os
import zipfile
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import FormatError, FormatVersionError, TruncatedFileError

FORMAT_KEY = "__format__"
VERSION_KEY = "__version__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], fmt: str, version: int) -> None:
    """Write ``arrays`` plus format/version tags to ``path`` deterministically."""
    payload = {FORMAT_KEY: np.array(fmt), VERSION_KEY: np.array(int(version), dtype=np.int64)}
    payload.update(arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(payload):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(payload[key]), allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_npz(path: str | os.PathLike, fmt: str, supported_versions: tuple[int, ...]) -> tuple[dict[str, np.ndarray], int]:
    """Read an archive written by :func:`write_npz` and check its tags.

    Returns:
        The arrays (tags removed) and the declared version.

    Raises:
        FormatVersionError: unknown format name or unsupported version.
        TruncatedFileError: the zip container is cut short or corrupt.
        FormatError: tags are missing.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise TruncatedFileError(f"{path}: unreadable or truncated archive ({exc})") from exc
    if FORMAT_KEY not in arrays or VERSION_KEY not in arrays:
        raise FormatError(f"{path}: missing format tags")
    name = str(arrays.pop(FORMAT_KEY))
    version = int(arrays.pop(VERSION_KEY))
    if name != fmt:
        raise FormatVersionError(f"{path}: expected format '{fmt}', found '{name}'")
    if version not in supported_versions:
        raise FormatVersionError(f"{path}: format '{fmt}' version {version} unsupported (supported: {supported_versions})")
    return arrays, version
