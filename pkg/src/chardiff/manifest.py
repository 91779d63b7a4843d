"""Append-only run manifest and exclusive run-directory ownership.

Manifest records are one JSON object per line with sorted keys. Wall-clock
fields are prefixed `wall_` so reproducibility comparisons can strip them;
everything else in a record is deterministic for a fixed config and seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from .errors import LockError

VOLATILE_PREFIX = "wall_"


class RunManifest:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, kind: str, **record):
        record = {"kind": kind, **record}
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self, kind: str | None = None) -> list[dict]:
        if not self.path.exists():
            return []
        out = [json.loads(line) for line in self.path.read_text().splitlines() if line]
        return [r for r in out if kind is None or r["kind"] == kind]


def strip_volatile(record: dict) -> dict:
    return {k: v for k, v in record.items() if not k.startswith(VOLATILE_PREFIX)}


def manifest_digest(path) -> str:
    """Content hash of a manifest with wall-clock fields removed."""
    sha = hashlib.sha256()
    for line in Path(path).read_text().splitlines():
        if line:
            sha.update(json.dumps(strip_volatile(json.loads(line)), sort_keys=True).encode())
            sha.update(b"\n")
    return sha.hexdigest()


class RunLock:
    """Exclusive-create lockfile; a held lock means the directory is owned."""

    def __init__(self, out_dir):
        self.lock_path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.lock_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"{self.lock_path.parent} is locked by another run "
                f"(remove {self.lock_path} if that run is dead)"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(f"pid={os.getpid()} started={time.time()}\n")
        return self

    def __exit__(self, *exc):
        try:
            self.lock_path.unlink()
        except FileNotFoundError:
            pass
        return False
