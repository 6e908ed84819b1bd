"""Checkpoint-IO: manifest.json + eine Rohdatei (<f8, little-endian) pro Segment.

Directory layout:
    <ckpt>/manifest.json     format_version, config echo, segment table, extras
    <ckpt>/<segment>.bin     raw float64 payload, C order
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from src.core.errors import CheckpointError
from src.utils.logger import get_logger

logger = get_logger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_DTYPE = "<f8"


@dataclass
class Checkpoint:
    segments: dict[str, np.ndarray]
    config: dict[str, Any]
    extras: dict[str, Any] = field(default_factory=dict)


def _segment_file(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_checkpoint(checkpoint: Checkpoint, path: str | os.PathLike) -> Path:
    """Schreibt einen Checkpoint; vorhandene Segmentdateien werden überschrieben."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        table = []
        for name in sorted(checkpoint.segments):
            arr = np.asarray(checkpoint.segments[name])
            if not np.issubdtype(arr.dtype, np.number):
                raise CheckpointError(f"Segment {name} ist nicht numerisch")
            payload = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE)
            file_name = _segment_file(name)
            (root / file_name).write_bytes(payload.tobytes())
            table.append({"name": name, "file": file_name, "shape": list(arr.shape), "dtype": PAYLOAD_DTYPE})
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": checkpoint.config,
            "segments": table,
            "extras": checkpoint.extras,
        }
        with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise CheckpointError(f"Checkpoint konnte nicht geschrieben werden: {root} ({e})") from e
    logger.info("Checkpoint gespeichert: %s (%d Segmente)", root, len(table))
    return root


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"Kein Checkpoint gefunden: {root}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (json.JSONDecodeError, OSError) as e:
        raise CheckpointError(f"Manifest nicht lesbar: {manifest_path} ({e})") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint-Version {version} wird nicht unterstützt (erwartet {FORMAT_VERSION})"
        )
    segments: dict[str, np.ndarray] = {}
    for entry in manifest.get("segments", []):
        file_path = root / entry["file"]
        shape = tuple(int(d) for d in entry["shape"])
        try:
            raw = np.frombuffer(file_path.read_bytes(), dtype=entry.get("dtype", PAYLOAD_DTYPE))
        except OSError as e:
            raise CheckpointError(f"Segment fehlt: {file_path} ({e})") from e
        expected = int(np.prod(shape, dtype=np.int64))
        if raw.size != expected:
            raise CheckpointError(
                f"Segment {entry['name']} beschädigt: {raw.size} Werte, erwartet {expected}"
            )
        segments[entry["name"]] = raw.astype(np.float64).reshape(shape)
    logger.info("Checkpoint geladen: %s", root)
    return Checkpoint(segments, manifest.get("config", {}), manifest.get("extras", {}))
