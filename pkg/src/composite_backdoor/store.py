"""Run-directory persistence: hash-named artifacts, append-only ledger, lock.

Each experiment run owns one directory.  Artifacts are written under names
that embed a *stage key* — the hash of everything that determines their
content — so reruns with unchanged inputs find their outputs already present
and record a cache hit instead of recomputing.  A human-readable JSONL ledger
accumulates one entry per stage execution with input/output hashes and wall
time, giving a complete provenance chain from raw inputs to final report.
"""

from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

from .errors import StoreLockError
from .serialization import canonical_dumps, read_json, sha256_file, write_json

__all__ = ["ArtifactStore", "RunLedger", "run_lock"]

LEDGER_NAME = "ledger.jsonl"
LOCK_NAME = ".lock"


class RunLedger:
    """Append-only JSONL log of stage executions in a run directory."""

    def __init__(self, run_dir: str | Path) -> None:
        self.path = Path(run_dir) / LEDGER_NAME

    def append(
        self,
        stage: str,
        stage_key: str,
        inputs: dict,
        outputs: dict[str, str],
        seconds: float,
        cache_hit: bool = False,
    ) -> dict:
        entry = {
            "stage": stage,
            "stage_key": stage_key,
            "inputs": inputs,
            "outputs": outputs,
            "seconds": round(float(seconds), 3),
            "cache_hit": bool(cache_hit),
            "time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(canonical_dumps(entry) + "\n")
        return entry

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def exists(self) -> bool:
        return self.path.exists()

    def artifacts(self) -> dict[str, str]:
        """Mapping of artifact file name -> content hash, last write wins."""
        out: dict[str, str] = {}
        for entry in self.entries():
            out.update(entry.get("outputs", {}))
        return out


class ArtifactStore:
    """Hash-keyed file layout inside a single run directory."""

    def __init__(self, run_dir: str | Path) -> None:
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.ledger = RunLedger(self.run_dir)

    def artifact_path(self, stage: str, stage_key: str, suffix: str, name: str | None = None) -> Path:
        """Deterministic artifact path for a stage execution."""
        base = name or stage
        return self.run_dir / f"{base}-{stage_key[:12]}{suffix}"

    def has_artifact(self, stage: str, stage_key: str, suffix: str, name: str | None = None) -> bool:
        return self.artifact_path(stage, stage_key, suffix, name).exists()

    def write_json_artifact(self, obj: dict, stage: str, stage_key: str, name: str | None = None) -> Path:
        return write_json(self.artifact_path(stage, stage_key, ".json", name), obj)

    def read_json_artifact(self, stage: str, stage_key: str, name: str | None = None) -> dict:
        return read_json(self.artifact_path(stage, stage_key, ".json", name))

    def hash_outputs(self, paths: list[Path]) -> dict[str, str]:
        return {p.name: sha256_file(p) for p in paths}


@contextmanager
def run_lock(run_dir: str | Path):
    """Exclusive ownership of a run directory for the duration of a command.

    A second command on the same directory fails fast with
    :class:`StoreLockError`.  Locks left behind by dead processes are
    reclaimed automatically.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_NAME

    def try_acquire() -> bool:
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return True

    if not try_acquire():
        stale = False
        try:
            pid = int(lock_path.read_text().strip() or "0")
            if pid > 0:
                os.kill(pid, 0)  # probe only; raises if the pid is gone
            else:
                stale = True
        except (ValueError, FileNotFoundError):
            stale = True
        except ProcessLookupError:
            stale = True
        except PermissionError:
            pass  # pid exists but belongs to someone else: genuinely held
        if stale:
            lock_path.unlink(missing_ok=True)
        if not stale or not try_acquire():
            raise StoreLockError(
                f"run directory {run_dir} is locked by another process "
                f"(remove {lock_path} if that process is gone)"
            )
    try:
        yield
    finally:
        lock_path.unlink(missing_ok=True)
