"""Key-value config documents: UTF-8 text, one `key = value` per line, # comments.

Used for model/train config files, checkpoint meta and dataset meta. Values
are kept as strings; callers coerce. Tabs are legal inside values (used for
embedded name lists).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import MalformedDocument


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedDocument(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise MalformedDocument(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def format_kv(items: dict[str, str]) -> str:
    lines = [f"{k} = {v}" for k, v in items.items()]
    return "\n".join(lines) + "\n"


def write_kv(path: str | Path, items: dict[str, str]) -> None:
    Path(path).write_text(format_kv(items), encoding="utf-8")


def config_digest(items: dict[str, object]) -> str:
    """Short stable digest of a resolved configuration (sorted key order)."""
    blob = "\n".join(f"{k}={items[k]}" for k in sorted(items)).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def get_bool(items: dict[str, str], key: str, default: bool = False) -> bool:
    if key not in items:
        return default
    v = items[key].lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise MalformedDocument(f"{key}: not a boolean: {items[key]!r}")
