"""
Run manifests, content hashes and weight blobs

File artifacts get a sidecar `<file>.manifest.json`; directory artifacts
carry `run_manifest.json` inside. Loading an artifact that has a manifest
re-hashes it and refuses to continue on mismatch.
"""

import os
import hashlib
import logging
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np

from .config import TOOLKIT_VERSION
from .errors import ArtifactIntegrityError
from .file_parser import read_json, write_json

SIDECAR_SUFFIX = ".manifest.json"
DIR_MANIFEST = "run_manifest.json"
BLOB_DTYPE = "<f8"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_dir(path: str) -> str:
    """Hash of (relative path, file hash) pairs, excluding the directory manifest"""
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, path).replace(os.sep, "/")
            if rel == DIR_MANIFEST:
                continue
            digest.update(rel.encode("utf-8"))
            digest.update(b"\0")
            digest.update(sha256_file(full).encode("ascii"))
            digest.update(b"\n")
    return digest.hexdigest()


def sha256_path(path: str) -> str:
    if os.path.isdir(path):
        return sha256_dir(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return sha256_file(path)


def manifest_path_for(path: str) -> str:
    if os.path.isdir(path):
        return os.path.join(path, DIR_MANIFEST)
    return path + SIDECAR_SUFFIX


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    toolkit_version: str = TOOLKIT_VERSION
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RunManifest":
        try:
            return cls(**payload)
        except TypeError as e:
            raise ArtifactIntegrityError(f"Malformed run manifest: {e}") from e

    def record_inputs(self, paths: Iterable[str]) -> None:
        for path in paths:
            if path:
                self.inputs[os.path.basename(path.rstrip("/\\"))] = verify_artifact(path)

    def finish(self, outputs: Iterable[str]) -> None:
        """Hash every output and write its manifest"""
        self.finished_at = utc_now()
        outputs = [p for p in outputs if p]
        for path in outputs:
            self.outputs[os.path.basename(path.rstrip("/\\"))] = sha256_path(path)
        for path in outputs:
            write_json(manifest_path_for(path), self.to_dict())
        logging.info("[Artifacts] Wrote manifests | command=%s | outputs=%s", self.command, len(outputs))


def read_manifest(path: str) -> Optional[RunManifest]:
    manifest_file = manifest_path_for(path)
    if not os.path.exists(manifest_file):
        return None
    return RunManifest.from_dict(read_json(manifest_file))


def verify_artifact(path: str) -> str:
    """
    Return the artifact's sha256, checking it against its manifest if one exists

    Raises ArtifactIntegrityError when the recorded hash differs.
    """
    actual = sha256_path(path)
    manifest = read_manifest(path)
    if manifest is None:
        logging.debug("[Artifacts] No manifest, recording raw input | path=%s", path)
        return actual
    expected = manifest.outputs.get(os.path.basename(path.rstrip("/\\")))
    if expected is not None and expected != actual:
        raise ArtifactIntegrityError(
            f"Artifact {path} was modified after it was written (sha256 {actual[:12]} != {expected[:12]})"
        )
    return actual


# ----------------------------------------------------------------------------
# Weight blobs
# ----------------------------------------------------------------------------

def save_blob(path: str, array: np.ndarray) -> Dict[str, Any]:
    """Write a raw little-endian float64 blob; returns its manifest entry"""
    data = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
    with open(path, "wb") as f:
        f.write(data)
    return {"file": os.path.basename(path), "shape": list(np.shape(array)), "dtype": BLOB_DTYPE, "sha256": sha256_bytes(data)}


def load_blob(directory: str, entry: Dict[str, Any]) -> np.ndarray:
    path = os.path.join(directory, entry["file"])
    with open(path, "rb") as f:
        data = f.read()
    if entry.get("sha256") and sha256_bytes(data) != entry["sha256"]:
        raise ArtifactIntegrityError(f"Weight blob {path} does not match its recorded sha256")
    shape: Tuple[int, ...] = tuple(entry["shape"])
    expected = int(np.prod(shape)) * 8
    if len(data) != expected:
        raise ArtifactIntegrityError(f"Weight blob {path} has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=entry.get("dtype", BLOB_DTYPE)).astype(np.float64).reshape(shape)
