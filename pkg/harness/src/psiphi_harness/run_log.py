import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
EVENTS = "events.jsonl"
VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "psiphi-core", "psiphi-learning", "psiphi-harness")


def canonical_json(data: Any) -> str:
    """Key-sorted, whitespace-free JSON used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_digest(config: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class RunLogger:
    """Writes one run's outputs: manifest, CSV tables and an event log.

    Nothing written here carries a timestamp, so identical config and seed
    give byte-identical files.

    Args:
        output_dir: Directory for run outputs
        run_id: Optional subdirectory name inside output_dir
    """

    def __init__(self, output_dir: Union[str, Path], run_id: Optional[str] = None):
        self.output_dir = Path(output_dir)
        self.run_id = run_id
        self.run_dir = self.output_dir / run_id if run_id else self.output_dir
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def log_config(self, config: Dict[str, Any], seed: int, command: Optional[str] = None) -> Dict[str, Any]:
        """Write manifest.json with the config, its sha256 and package versions."""
        manifest = {
            "command": command,
            "seed": seed,
            "config_sha256": config_digest(config),
            "versions": package_versions(),
            "config": config,
        }
        with open(self.path(MANIFEST), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info(f"Wrote manifest for seed {seed} to {self.run_dir}")
        return manifest

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        """Write (or overwrite) name.csv."""
        csv_path = self.path(f"{name}.csv")
        frame.to_csv(csv_path, index=False)
        logger.debug(f"Wrote {len(frame)} rows to {csv_path}")
        return csv_path

    def append_table(self, name: str, frame: pd.DataFrame) -> Path:
        """Append rows to name.csv, writing the header on first use."""
        csv_path = self.path(f"{name}.csv")
        if not csv_path.exists():
            frame.to_csv(csv_path, index=False)
        else:
            frame.to_csv(csv_path, mode='a', header=False, index=False)
        return csv_path

    def log_event(self, event_type: str, details: Dict[str, Any]) -> None:
        """Append one JSON line to events.jsonl."""
        event = {"type": event_type, **details}
        with open(self.path(EVENTS), "a") as f:
            f.write(canonical_json(event) + "\n")

    def load_table(self, name: str) -> pd.DataFrame:
        csv_path = self.path(f"{name}.csv")
        if not csv_path.exists():
            return pd.DataFrame()
        return pd.read_csv(csv_path)

    def load_manifest(self) -> Dict[str, Any]:
        with open(self.path(MANIFEST)) as f:
            return json.load(f)


@dataclass
class EvalReport:
    """Named result tables collected over an experiment.

    Attributes:
        tables: Table name to frame; add() concatenates rows under a name
    """
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def add(self, name: str, frame: pd.DataFrame) -> None:
        if name in self.tables:
            frame = pd.concat([self.tables[name], frame], ignore_index=True)
        self.tables[name] = frame

    def __getitem__(self, name: str) -> pd.DataFrame:
        return self.tables[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tables

    def write(self, run_log: RunLogger) -> None:
        """Each table as name.csv plus name.jsonl (one record per line)."""
        for name, frame in self.tables.items():
            run_log.write_table(name, frame)
            frame.to_json(run_log.path(f"{name}.jsonl"), orient="records", lines=True)
        logger.info(f"Wrote {len(self.tables)} table(s) to {run_log.run_dir}")
