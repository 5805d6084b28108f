"""Seeded, resumable run manifests.

A manifest records the config hash, global seed, and per-stage status with
artifact paths and content hashes. Stage transitions are pending -> running
-> done|failed; re-running a done stage is a no-op, resuming with a changed
config is an error, and artifacts of done stages are immutable.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import ConfigError, ManifestError
from .jsonl import dumps_canonical, sha256_file, sha256_text

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"

_TRANSITIONS = {
    STATUS_PENDING: {STATUS_RUNNING},
    STATUS_RUNNING: {STATUS_DONE, STATUS_FAILED},
    STATUS_FAILED: {STATUS_RUNNING},  # resume re-runs a failed stage
    STATUS_DONE: set(),
}


def config_hash(config: dict) -> str:
    return sha256_text(dumps_canonical(config))[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


@dataclass
class StageState:
    status: str = STATUS_PENDING
    artifacts: dict[str, str] = field(default_factory=dict)  # path -> sha256
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "artifacts": dict(sorted(self.artifacts.items())),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StageState":
        return cls(
            status=obj["status"],
            artifacts=dict(obj.get("artifacts", {})),
            started_at=obj.get("started_at"),
            finished_at=obj.get("finished_at"),
            error=obj.get("error"),
        )


@dataclass
class RunManifest:
    run_id: str
    config_digest: str
    seed: int
    path: Path
    stages: dict[str, StageState] = field(default_factory=dict)

    @classmethod
    def create(cls, run_dir, run_id: str, config: dict, seed: int) -> "RunManifest":
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = cls(
            run_id=run_id,
            config_digest=config_hash(config),
            seed=seed,
            path=run_dir / "manifest.json",
        )
        manifest.save()
        return manifest

    @classmethod
    def load(cls, run_dir, config: Optional[dict] = None) -> "RunManifest":
        """Load an existing manifest; a config-hash mismatch is config drift."""
        path = Path(run_dir) / "manifest.json"
        obj = json.loads(path.read_text("utf-8"))
        manifest = cls(
            run_id=obj["run_id"],
            config_digest=obj["config_hash"],
            seed=obj["seed"],
            path=path,
            stages={name: StageState.from_json(s) for name, s in obj["stages"].items()},
        )
        if config is not None and config_hash(config) != manifest.config_digest:
            raise ConfigError(
                "config drift: the resume config does not match the manifest's config hash"
            )
        return manifest

    @classmethod
    def open(cls, run_dir, run_id: str, config: dict, seed: int) -> "RunManifest":
        """Load the manifest if one exists (checking drift), else create it."""
        path = Path(run_dir) / "manifest.json"
        if path.exists():
            return cls.load(run_dir, config)
        return cls.create(run_dir, run_id, config, seed)

    def save(self) -> None:
        payload = {
            "schema_version": 1,
            "run_id": self.run_id,
            "config_hash": self.config_digest,
            "seed": self.seed,
            "stages": {name: s.to_json() for name, s in sorted(self.stages.items())},
        }
        self.path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")

    def stage(self, name: str) -> StageState:
        return self.stages.setdefault(name, StageState())

    def status(self, name: str) -> str:
        return self.stages.get(name, StageState()).status

    def _transition(self, name: str, new_status: str) -> None:
        state = self.stage(name)
        if new_status not in _TRANSITIONS[state.status]:
            raise ManifestError(f"stage {name}: illegal transition {state.status} -> {new_status}")
        state.status = new_status


def run_stage(
    manifest: RunManifest,
    name: str,
    fn: Callable[[], Sequence[str]],
    upstream: Sequence[str] = (),
) -> RunManifest:
    """Execute a stage, recording its artifacts and content hashes.

    fn runs the stage and returns the artifact paths it wrote. Re-running a
    done stage is a no-op; a stage whose upstream is not done is an error.
    Exceptions mark the stage failed (resumable) and re-raise.
    """
    for dep in upstream:
        if manifest.status(dep) != STATUS_DONE:
            raise ManifestError(f"stage {name}: upstream stage {dep} is not done")
    state = manifest.stage(name)
    if state.status == STATUS_DONE:
        return manifest
    manifest._transition(name, STATUS_RUNNING)
    state.started_at = state.started_at or _now()
    manifest.save()
    try:
        artifacts = fn()
    except Exception as exc:
        manifest._transition(name, STATUS_FAILED)
        state.error = str(exc)
        state.finished_at = _now()
        manifest.save()
        raise
    state.artifacts = {str(p): sha256_file(p) for p in artifacts}
    manifest._transition(name, STATUS_DONE)
    state.error = None
    state.finished_at = _now()
    manifest.save()
    return manifest
