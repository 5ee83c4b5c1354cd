"""Named-tensor checkpoint files.

Layout:
    line 1   b"ADNETCKPT1\\n"
    line 2   JSON header (sorted keys, one line):
             {"meta": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    rest     concatenated f32le payloads, C-order, at the listed byte offsets
"""
import json
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import logging

logger = logging.getLogger(__name__)

MAGIC = b"ADNETCKPT1\n"


class CheckpointError(Exception):
    """Unreadable, truncated or inconsistent checkpoint files"""
    pass


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray],
                    meta: Dict[str, Any] = None) -> Path:
    path = Path(path)
    entries, payloads, offset = [], [], 0
    for name in sorted(tensors):
        payload = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(tensors[name])),
                        "offset": offset, "nbytes": len(payload)})
        payloads.append(payload)
        offset += len(payload)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(header.encode("utf-8") + b"\n")
            for payload in payloads:
                f.write(payload)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    logger.debug(f"Saved {len(entries)} tensors ({offset} bytes) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    header_end = raw.find(b"\n", len(MAGIC))
    if header_end < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[len(MAGIC):header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}")

    body = raw[header_end + 1:]
    tensors = {}
    for entry in header.get("tensors", []):
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if start + nbytes > len(body) or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated or mis-sized")
        tensors[entry["name"]] = np.frombuffer(body, dtype="<f4", count=nbytes // 4,
                                               offset=start).reshape(shape).astype(np.float32)
    return tensors, header.get("meta", {})
