"""Run manifests: enough to re-run a command and check its outputs byte for byte."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from milsurv.errors import ValidationError

MANIFEST_NAME = "manifest.json"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | Path, exclude: tuple[str, ...] = (MANIFEST_NAME,)) -> dict[str, str]:
    """SHA-256 of every file under ``root`` keyed by POSIX relative path."""
    root = Path(root)
    if root.is_file():
        return {root.name: file_sha256(root)}
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in exclude:
            out[rel] = file_sha256(p)
    return out


@dataclass
class RunManifest:
    tool: str
    version: str
    command: str
    argv: list[str]
    config: dict
    seed: int
    threads: int | None
    inputs: dict[str, dict[str, str]] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunManifest":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"malformed manifest: {exc}") from None

    def save(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            return cls.from_json(json.loads(path.read_text()))
        except FileNotFoundError:
            raise ValidationError(f"missing manifest: {path}") from None


def diff_hashes(expected: dict[str, str], actual: dict[str, str]) -> list[str]:
    """Human-readable differences between two hash maps (empty when identical)."""
    out = []
    for k in sorted(set(expected) | set(actual)):
        if k not in actual:
            out.append(f"missing: {k}")
        elif k not in expected:
            out.append(f"unexpected: {k}")
        elif expected[k] != actual[k]:
            out.append(f"differs: {k}")
    return out
