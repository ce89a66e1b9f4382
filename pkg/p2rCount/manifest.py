#manifest.py

import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .exceptions import DataError
from .utils import PathLike, atomic_write_text, sha256_file

logger = logging.getLogger(__name__)

MANIFEST_FILE = "run_manifest.json"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    started_at: str
    finished_at: str
    outputs: List[str] = Field(default_factory=list)
    checksums: Dict[str, str] = Field(default_factory=dict)
    version: str = __version__


def _relative(path: Path, root: Path) -> str:
    try:
        return os.path.relpath(path, root)
    except ValueError:
        return str(path)


def write_manifest(
    out_dir: PathLike,
    command: str,
    config: Dict[str, Any],
    seed: Optional[int],
    started_at: str,
    outputs: Iterable[PathLike],
) -> Path:
    """Checksum every emitted file and write ``run_manifest.json`` atomically."""
    out_dir = Path(out_dir)
    paths = sorted({Path(p) for p in outputs if Path(p).is_file()})
    names = [_relative(p, out_dir) for p in paths]
    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        started_at=started_at,
        finished_at=utc_now(),
        outputs=names,
        checksums={name: sha256_file(p) for name, p in zip(names, paths)},
    )
    target = out_dir / MANIFEST_FILE
    atomic_write_text(target, json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    logger.info("run manifest written to %s", target)
    return target


def load_manifest(path: PathLike) -> RunManifest:
    try:
        return RunManifest(**json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Failed to load run manifest: {e}")
        raise DataError(f"Error loading run manifest {path}: {str(e)}")


def verify_manifest(path: PathLike) -> List[str]:
    """Outputs whose current checksum differs from the recorded one."""
    path = Path(path)
    manifest = load_manifest(path)
    root = path.parent
    return [
        name for name, digest in manifest.checksums.items()
        if not (root / name).is_file() or sha256_file(root / name) != digest
    ]
