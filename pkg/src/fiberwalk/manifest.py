"""Run manifests: every CLI invocation records what ran, on what, with what."""
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .fileio import write_text_atomic

MANIFEST_FORMAT = "fiberwalk-run/1"


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    model_checksum: str | None = None
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    version: str = ""

    def finalize(self) -> dict:
        from . import __version__
        body = {
            "format": MANIFEST_FORMAT,
            "command": self.command,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "model_checksum": self.model_checksum,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished or _now(),
            "version": self.version or __version__,
        }
        return body

    def write(self, path) -> Path:
        path = Path(path)
        write_text_atomic(path, json.dumps(self.finalize(), indent=2) + "\n")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def new_manifest(command: str, config: dict, seed=None, model_checksum=None) -> RunManifest:
    return RunManifest(command=command, config=config, seed=seed,
                       model_checksum=model_checksum, started=_now())


def read_manifest(path) -> dict:
    body = json.loads(Path(path).read_text())
    if body.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a run manifest")
    return body
