"""Run manifests: resolved config, file digests, and timing for each CLI run.

The manifest is written atomically next to the primary output so a
reproduction can be verified by comparing output digests.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    tool_version: str
    duration_seconds: float = 0.0
    input_digests: dict[str, str] = field(default_factory=dict)
    output_digests: dict[str, str] = field(default_factory=dict)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path_for(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    path = Path(path)
    doc = {
        "command": manifest.command,
        "config": manifest.config,
        "seed": manifest.seed,
        "tool_version": manifest.tool_version,
        "duration_seconds": manifest.duration_seconds,
        "input_digests": manifest.input_digests,
        "output_digests": manifest.output_digests,
    }
    payload = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
