import csv
import io
import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence

import numpy as np
import torch

from app.core.exceptions import ArtifactNotFoundError, ChecksumError, ConfigError
from app.core.logger import logger
from app.schema.experiment_schema import ExperimentConfig, RunManifest
from app.utils.seeding import bytes_digest

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}
    try:
        versions["navworld"] = metadata.version("navworld")
    except metadata.PackageNotFoundError:
        versions["navworld"] = "unknown"
    return versions


class RunCrud:
    """
    One run directory: the producing config, metric files and a checksummed manifest.

    Every write goes through ``path_for`` so nothing lands outside the run
    directory.
    """

    def __init__(self, root: Path, command: str = "run"):
        self.root = Path(root)
        self.command = command
        self.artifacts: Dict[str, str] = {}
        self.stages: Dict[str, float] = {}

    def path_for(self, name: str) -> Path:
        path = (self.root / name).resolve()
        if self.root.resolve() not in (path, *path.parents):
            raise ConfigError(f"refusing to write {name!r} outside {self.root}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _write(self, name: str, raw: bytes) -> Path:
        path = self.path_for(name)
        path.write_bytes(raw)
        self.artifacts[name] = bytes_digest(raw)
        return path

    def register(self, checksums: Dict[str, str], prefix: str = "") -> None:
        """Record files written by another store under this run."""
        for name, digest in checksums.items():
            self.artifacts[f"{prefix}{name}"] = digest

    def write_config(self, config: ExperimentConfig) -> Path:
        return self._write(CONFIG_FILE, config.model_dump_json(indent=2).encode("utf-8"))

    def write_json(self, name: str, payload: Any) -> Path:
        if hasattr(payload, "model_dump"):
            payload = payload.model_dump(mode="json")
        raw = json.dumps(payload, indent=2, sort_keys=True, default=str).encode("utf-8")
        return self._write(name, raw)

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """UTF-8, header row, '.' decimals, shortest round-trip float repr, rows in the given order."""
        buffer = io.StringIO(newline="")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        return self._write(name, buffer.getvalue().encode("utf-8"))

    def record_stage(self, stage: str, seconds: float) -> None:
        self.stages[stage] = round(seconds, 6)

    def finalize(self, config: ExperimentConfig) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            config_hash=config.digest(),
            artifacts=dict(sorted(self.artifacts.items())),
            versions=_versions(),
            stages=self.stages,
        )
        self.path_for(MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"{self.command}: wrote {len(self.artifacts)} artifacts to {self.root}")
        return manifest

    def load_manifest(self) -> RunManifest:
        path = self.root / MANIFEST_FILE
        if not path.is_file():
            raise ArtifactNotFoundError(path, "run manifest")
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))

    def verify(self) -> RunManifest:
        """
        Re-hash every recorded artifact.

        Raises:
            ArtifactNotFoundError: manifest or an artifact is missing.
            ChecksumError: an artifact's content changed.
        """
        manifest = self.load_manifest()
        for name, expected in manifest.artifacts.items():
            path = self.root / name
            if not path.is_file():
                raise ArtifactNotFoundError(path)
            if bytes_digest(path.read_bytes()) != expected:
                raise ChecksumError(f"{path} does not match its recorded checksum")
        return manifest
