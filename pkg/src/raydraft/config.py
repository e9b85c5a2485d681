"""Run configuration and provenance plumbing.

Settings resolve with precedence: explicit flags > environment variables
(RAYDRAFT_<KEY>) > key=value config file > built-in defaults. Every
artifact-producing command embeds the fully resolved configuration, the
seeds and the model file hashes so a result can be traced and re-run.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

ENV_PREFIX = "RAYDRAFT_"


class UserError(Exception):
    """Invalid input or request; maps to exit code 1 at the CLI."""


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse a key = value file; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().lower()] = value.strip()
    return values


def resolve(
    key: str,
    flag_value: Any = None,
    file_values: Mapping[str, str] | None = None,
    default: Any = None,
    cast=str,
):
    """One setting through the flags > env > file > default chain."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(ENV_PREFIX + key.upper())
    if env is not None:
        return cast(env)
    if file_values and key.lower() in file_values:
        return cast(file_values[key.lower()])
    return default


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def provenance_block(
    config: Mapping[str, Any],
    model_hashes: Mapping[str, str] | None = None,
    seed: int | None = None,
    warnings: list[str] | None = None,
) -> dict:
    resolved = {k: config[k] for k in sorted(config)}
    block = {
        "config": resolved,
        "config_hash": sha256_json(resolved),
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    if seed is not None:
        block["seed"] = seed
    if model_hashes is not None:
        block["model_hashes"] = dict(sorted(model_hashes.items()))
    if warnings:
        block["warnings"] = list(warnings)
    return block
