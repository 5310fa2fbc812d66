"""
Run manifests.

Every subcommand writes one JSON manifest next to its primary output with
the resolved settings, paths, seed, version and timestamps, plus the exact
argument list so the run can be replayed with --from-manifest.
"""

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from config import VERSION
from errors import ConfigError
from utils import ensure_parent_dir, write_json

MANIFEST_SUFFIX = ".manifest.json"


def utc_now() -> str:
    """Current UTC time in ISO 8601."""
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Record of one command-line run.

    Attributes:
        subcommand: Subcommand name
        argv: Arguments after the program name, replayable as-is
        config: Resolved configuration values
        inputs: Input paths keyed by role
        outputs: Output paths keyed by role
        seed: Seed in effect
        version: Tool version
        started / finished: UTC timestamps
    """

    subcommand: str
    argv: List[str]
    config: Dict[str, Any]
    inputs: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, Any] = field(default_factory=dict)
    seed: int = 42
    version: str = VERSION
    started: str = field(default_factory=utc_now)
    finished: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "argv": list(self.argv),
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        try:
            return cls(
                subcommand=data["subcommand"],
                argv=list(data["argv"]),
                config=data.get("config", {}),
                inputs=data.get("inputs", {}),
                outputs=data.get("outputs", {}),
                seed=data.get("seed", 42),
                version=data.get("version", VERSION),
                started=data.get("started", ""),
                finished=data.get("finished"),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Malformed manifest: {e}") from e

    def finish(self, path: str) -> str:
        """Stamp the end time and write the manifest."""
        self.finished = utc_now()
        ensure_parent_dir(path)
        write_json(path, self.to_dict())
        return path


def manifest_path(primary_output: str) -> str:
    """Manifest location for a primary output file or directory."""
    if os.path.isdir(primary_output):
        return os.path.join(primary_output, "run" + MANIFEST_SUFFIX)
    return primary_output + MANIFEST_SUFFIX


def load_manifest(path: str) -> RunManifest:
    """Read a manifest written by RunManifest.finish."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid manifest JSON: {e}") from e
    return RunManifest.from_dict(data)
