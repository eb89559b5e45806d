"""
Checkpoint container.

Layout: the magic line "TGCKPT1", one JSON header line (metadata plus the
name, shape, byte offset and element count of every tensor), then the tensors
as little-endian float64 blobs in header order.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from ..errors import DataFormatError

logger = logging.getLogger(__name__)

MAGIC = b"TGCKPT1"
_DTYPE = np.dtype("<f8")


def save_checkpoint(
    path: Union[str, Path],
    tensors: Dict[str, np.ndarray],
    metadata: Dict[str, Any] | None = None,
) -> None:
    """Write named tensors and a JSON-serializable metadata dict"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(np.asarray(array, dtype=np.float64)).astype(_DTYPE, copy=False)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        blob = data.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"metadata": metadata or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)
    logger.info(f"[NN] Saved checkpoint {path} ({len(entries)} tensors, {offset} bytes)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a checkpoint.

    Returns:
        (tensors by name in stored order, metadata)

    Raises:
        DataFormatError: Missing file, wrong magic, bad header or truncated blob
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"Cannot read checkpoint {path}: {e}") from e

    first = raw.find(b"\n")
    if first < 0 or raw[:first] != MAGIC:
        raise DataFormatError(f"{path} is not a TGCKPT1 checkpoint")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise DataFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[first + 1:second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: unreadable header: {e}") from e

    body = raw[second + 1:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        start = entry["offset"]
        stop = start + entry["count"] * _DTYPE.itemsize
        if stop > len(body):
            raise DataFormatError(f"{path}: tensor {entry['name']} is truncated")
        array = np.frombuffer(body[start:stop], dtype=_DTYPE).astype(np.float64)
        tensors[entry["name"]] = array.reshape(entry["shape"])
    return tensors, header.get("metadata", {})
