from __future__ import annotations

import hashlib
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple
from zipfile import ZIP_STORED, BadZipFile, ZipFile, ZipInfo

from . import __version__
from .schemas import VerificationResult

logger = logging.getLogger(__name__)

BUNDLE_NAME = "run.zip"
MANIFEST_NAME = "manifest.json"


def sha256_hex(data: bytes) -> str:
    return "0x" + hashlib.sha256(data).hexdigest()


def _deterministic_zip(file_map: Dict[str, bytes], out_path: Path) -> bytes:
    # byte-stable output: entry order, mtime, mode and compression are all pinned
    out_path.parent.mkdir(parents=True, exist_ok=True)
    mem = io.BytesIO()
    with ZipFile(mem, mode="w", compression=ZIP_STORED) as zf:
        for name in sorted(file_map):
            zi = ZipInfo(filename=name, date_time=(1980, 1, 1, 0, 0, 0))
            zi.external_attr = 0o644 << 16
            zf.writestr(zi, file_map[name])
    data = mem.getvalue()
    out_path.write_bytes(data)
    return data


def build_manifest(command: str, seed: int, resolved_config: Dict[str, Any], files: Dict[str, bytes]) -> bytes:
    manifest = {
        "version": "1.0",
        "tool": f"voxatn {__version__}",
        "command": command,
        "seed": seed,
        "config": resolved_config,
        "files": [
            {"name": name, "sha256": sha256_hex(content), "size": len(content)}
            for name, content in sorted(files.items())
        ],
    }
    return json.dumps(manifest, indent=2, sort_keys=True, separators=(",", ": ")).encode("utf-8")


def create_bundle(
    out_dir: str | Path,
    command: str,
    seed: int,
    resolved_config: Dict[str, Any],
    files: Dict[str, bytes],
) -> Tuple[Path, str]:
    """
    Pack a run's artifacts with a manifest.json into out_dir/run.zip.
    Returns (zip_path, bundle_hash).
    """
    out = Path(out_dir)
    manifest_json = build_manifest(command, seed, resolved_config, files)
    (out / MANIFEST_NAME).parent.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_NAME).write_bytes(manifest_json)
    zip_path = out / BUNDLE_NAME
    zip_bytes = _deterministic_zip({**files, MANIFEST_NAME: manifest_json}, zip_path)
    bundle_hash = sha256_hex(zip_bytes)
    logger.info(f"Bundle written: path={zip_path}, files={len(files)}, hash={bundle_hash}")
    return zip_path, bundle_hash


def verify_bundle(path: str | Path) -> VerificationResult:
    """
    Hash a run.zip and check every manifest entry against the archived bytes.
    Returns VerificationResult(bundle_hash, errors).
    """
    p = Path(path)
    errors: List[str] = []
    try:
        raw = p.read_bytes()
    except OSError as e:
        return VerificationResult(bundle_hash="", errors=[f"read_failed:{e}"])
    bundle_hash = sha256_hex(raw)

    try:
        with ZipFile(io.BytesIO(raw), "r") as zf:
            names = set(zf.namelist())

            def read(name: str) -> bytes:
                try:
                    return zf.read(name)
                except KeyError:
                    errors.append(f"missing_file:{name}")
                    return b""

            try:
                manifest = json.loads(read(MANIFEST_NAME).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                errors.append(f"manifest_invalid:{e}")
                return VerificationResult(bundle_hash=bundle_hash, errors=errors)

            listed = set()
            for entry in manifest.get("files", []):
                name, expected = entry.get("name"), entry.get("sha256")
                if not name or not expected:
                    errors.append("manifest_entry_invalid")
                    continue
                listed.add(name)
                if name not in names:
                    errors.append(f"missing_file:{name}")
                    continue
                content = read(name)
                if sha256_hex(content) != expected:
                    errors.append(f"file_hash_mismatch:{name}")
                if entry.get("size") != len(content):
                    errors.append(f"file_size_mismatch:{name}")
            for extra in sorted(names - listed - {MANIFEST_NAME}):
                errors.append(f"unlisted_file:{extra}")
    except BadZipFile as e:
        errors.append(f"zip_open_failed:{e}")

    logger.info(f"Bundle verified: path={p}, hash={bundle_hash}, errors={len(errors)}")
    return VerificationResult(bundle_hash=bundle_hash, errors=errors)
