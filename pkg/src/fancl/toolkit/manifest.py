"""JSON-lines dataset manifests: one ``{id, path, split}`` record per image."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fancl.errors import ContractError, FormatError
from fancl.toolkit.tensorfile import read_tensor

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class Record:
    id: str
    path: str
    split: str


def write_manifest(path, records) -> None:
    lines = [json.dumps({"id": r.id, "path": r.path, "split": r.split}) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, check_paths: bool = True) -> list[Record]:
    """Parse and validate a manifest; relative paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read manifest {path}: {exc.strerror}") from exc
    base = path.parent
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = Record(str(obj["id"]), str(obj["path"]), str(obj["split"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed manifest record ({exc})") from None
        if rec.split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split {rec.split!r}")
        full = Path(rec.path) if Path(rec.path).is_absolute() else base / rec.path
        if check_paths and not full.exists():
            raise FileNotFoundError(f"{path}:{lineno}: image file {full} does not exist")
        records.append(Record(rec.id, str(full), rec.split))
    query_ids = {r.id for r in records if r.split == "query"}
    gallery_ids = {r.id for r in records if r.split == "gallery"}
    if query_ids and gallery_ids and not query_ids & gallery_ids:
        raise ContractError(f"{path}: query and gallery identities do not overlap")
    return records


def load_split(records, split: str, dtype=np.float32):
    """Stack the images of one split into (N, H, W, C) plus their id strings."""
    chosen = [r for r in records if r.split == split]
    if not chosen:
        return np.zeros((0, 0, 0, 0), dtype=dtype), np.array([], dtype=str)
    images = np.stack([read_tensor(r.path).astype(dtype) for r in chosen])
    return images, np.array([r.id for r in chosen])
