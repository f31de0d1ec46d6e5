"""Versioned array bundles shared by the index, vocabulary and cascade files."""
from __future__ import annotations

import io
import json
import logging
import zipfile
from pathlib import Path

import numpy as np

from .errors import ModelFileError

logger = logging.getLogger(__name__)

# Fixed member timestamp so identical arrays give identical files.
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_bundle(path: str | Path, kind: str, version: int, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` as an ``.npz`` readable by :func:`numpy.load`."""
    path = Path(path)
    header = {"kind": kind, "version": version}
    members = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    members.update(arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(members[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    logger.info("Wrote %s v%d to %s", kind, version, path)


def load_bundle(path: str | Path, kind: str, version: int) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"Model file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise ModelFileError(f"Cannot read {path}: {exc}") from exc
    try:
        header = json.loads(str(arrays.pop("__header__")))
    except (KeyError, ValueError) as exc:
        raise ModelFileError(f"{path} has no bundle header") from exc
    if header.get("kind") != kind:
        raise ModelFileError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")
    if header.get("version") != version:
        raise ModelFileError(
            f"{path} is {kind} format v{header.get('version')}, this build reads v{version}"
        )
    return arrays
