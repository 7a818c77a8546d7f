import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import pandas as pd

from app.core.config import settings
from app.core.errors import InputError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def sha256_file(path: Path) -> str:
    """Hex digest of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_tree(root: Path) -> str:
    """Hash of every file under a directory, keyed by relative path"""
    digest = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(sha256_file(path).encode("ascii"))
    return digest.hexdigest()


def sha256_json(payload: Any) -> str:
    """Hash of the canonical (sorted-key, compact) JSON rendering"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_csv(path: Path, required: Sequence[str] = (), dtype: Optional[Dict[str, Any]] = None) -> pd.DataFrame:
    """Read an input CSV and check that the required columns are present"""
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    frame = pd.read_csv(path, dtype=dtype, keep_default_na=True, na_values=[settings.MISSING_MARKER])
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
    return frame


def write_csv(
    path: Path,
    frame: pd.DataFrame,
    columns: Optional[List[str]] = None,
    sort_by: Optional[List[str]] = None,
) -> pd.DataFrame:
    """Write a frame with fixed column order, row order and float format"""
    out = frame if columns is None else frame.loc[:, columns]
    if sort_by:
        out = out.sort_values(sort_by, kind="mergesort")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(
        path,
        index=False,
        float_format=settings.FLOAT_FORMAT,
        na_rep=settings.MISSING_MARKER,
        lineterminator="\n",
    )
    return out


class ArtifactStore:
    """Deterministic CSV artifact writer plus the run manifest"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.output_dir / MANIFEST_NAME

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_frame(
        self,
        name: str,
        frame: pd.DataFrame,
        columns: Optional[List[str]] = None,
        sort_by: Optional[List[str]] = None,
    ) -> Path:
        path = self.path(name)
        out = write_csv(path, frame, columns, sort_by)
        logger.info("wrote %s (%d rows)", name, len(out))
        self._record_artifact(name, path, len(out))
        return path

    def read_frame(self, name: str, required: Sequence[str] = (), dtype: Optional[Dict[str, Any]] = None) -> pd.DataFrame:
        return read_csv(self.path(name), required=required, dtype=dtype)

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    # Manifest

    def load_manifest(self) -> Dict[str, Any]:
        if self.manifest_path.exists():
            with open(self.manifest_path, "r", encoding="utf-8") as f:
                return json.load(f)
        return {"config_hash": None, "inputs": {}, "stages": {}, "artifacts": {}}

    def save_manifest(self, manifest: Dict[str, Any]) -> None:
        with open(self.manifest_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, sort_keys=True, indent=2)
            f.write("\n")

    def begin_run(self, config_payload: Dict[str, Any], inputs: Iterable[Path]) -> Dict[str, Any]:
        """Stamp config and input hashes; stage records from earlier runs are kept"""
        manifest = self.load_manifest()
        manifest["config_hash"] = sha256_json(config_payload)
        manifest["config"] = config_payload
        for item in inputs:
            item = Path(item)
            if item.is_file():
                manifest["inputs"][item.name] = sha256_file(item)
            elif item.is_dir():
                manifest["inputs"][item.name + "/"] = sha256_tree(item)
        self.save_manifest(manifest)
        return manifest

    def mark_stage(self, stage: str, status: str, detail: Optional[str] = None) -> None:
        manifest = self.load_manifest()
        record: Dict[str, Any] = {"status": status}
        if detail:
            record["detail"] = detail
        manifest["stages"][stage] = record
        self.save_manifest(manifest)

    def _record_artifact(self, name: str, path: Path, rows: int) -> None:
        manifest = self.load_manifest()
        manifest["artifacts"][name] = {"rows": int(rows), "sha256": sha256_file(path)}
        self.save_manifest(manifest)
