"""Persistence for the review service.

A single SQLite file holds studies, review sessions and the append-only
edit audit trail; images and cached interpretation artifacts live next to
it on disk, one directory per study. Schema documented in docs/storage.md.
"""

from __future__ import annotations

import json
import sqlite3
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path

STATUS_DRAFT = "draft"
STATUS_FINALIZED = "finalized"

_SCHEMA = """
CREATE TABLE IF NOT EXISTS studies (
    id TEXT PRIMARY KEY,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    study_id TEXT PRIMARY KEY REFERENCES studies(id),
    draft TEXT NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('draft', 'finalized')),
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS edits (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    study_id TEXT NOT NULL REFERENCES studies(id),
    edited_at TEXT NOT NULL,
    text TEXT NOT NULL
);
"""


class StudyNotFound(KeyError):
    pass


class SessionFinalized(RuntimeError):
    pass


class VersionConflict(RuntimeError):
    """Audit-length precondition failed; the session changed underneath."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ReviewStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.root / "review.sqlite3", check_same_thread=False)
        self._db.executescript(_SCHEMA)
        self._db.commit()

    # -- studies ----------------------------------------------------------

    def create_study(self, image_bytes: bytes) -> str:
        study_id = uuid.uuid4().hex[:12]
        study_dir = self.study_dir(study_id)
        study_dir.mkdir(parents=True, exist_ok=True)
        (study_dir / "image.png").write_bytes(image_bytes)
        with self._lock:
            self._db.execute("INSERT INTO studies (id, created_at) VALUES (?, ?)", (study_id, _now()))
            self._db.commit()
        return study_id

    def study_exists(self, study_id: str) -> bool:
        row = self._db.execute("SELECT 1 FROM studies WHERE id = ?", (study_id,)).fetchone()
        return row is not None

    def require_study(self, study_id: str) -> None:
        if not self.study_exists(study_id):
            raise StudyNotFound(study_id)

    def study_dir(self, study_id: str) -> Path:
        return self.root / "studies" / study_id

    def image_path(self, study_id: str) -> Path:
        return self.study_dir(study_id) / "image.png"

    # -- interpretation cache ---------------------------------------------

    def cache_path(self, study_id: str, name: str) -> Path:
        return self.study_dir(study_id) / name

    def read_cache(self, study_id: str, name: str):
        path = self.cache_path(study_id, name)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def write_cache(self, study_id: str, name: str, payload) -> None:
        path = self.cache_path(study_id, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=1), encoding="utf-8")

    # -- review sessions ----------------------------------------------------

    def create_session(self, study_id: str, draft: str) -> dict:
        self.require_study(study_id)
        now = _now()
        with self._lock:
            self._db.execute(
                "INSERT OR IGNORE INTO sessions (study_id, draft, status, created_at, updated_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (study_id, draft, STATUS_DRAFT, now, now),
            )
            self._db.commit()
        return self.get_session(study_id)

    def has_session(self, study_id: str) -> bool:
        row = self._db.execute("SELECT 1 FROM sessions WHERE study_id = ?", (study_id,)).fetchone()
        return row is not None

    def get_session(self, study_id: str) -> dict:
        row = self._db.execute(
            "SELECT draft, status, created_at, updated_at FROM sessions WHERE study_id = ?",
            (study_id,),
        ).fetchone()
        if row is None:
            raise StudyNotFound(study_id)
        audit = [
            {"edited_at": edited_at, "text": text}
            for edited_at, text in self._db.execute(
                "SELECT edited_at, text FROM edits WHERE study_id = ? ORDER BY seq", (study_id,)
            )
        ]
        return {
            "study_id": study_id,
            "draft_report": row[0],
            "status": row[1],
            "created_at": row[2],
            "updated_at": row[3],
            "audit": audit,
            "audit_length": len(audit),
        }

    def update_draft(self, study_id: str, text: str, expected_audit_length: int | None = None) -> dict:
        with self._lock:
            session = self.get_session(study_id)
            if session["status"] == STATUS_FINALIZED:
                raise SessionFinalized(study_id)
            if expected_audit_length is not None and expected_audit_length != session["audit_length"]:
                raise VersionConflict(
                    f"audit length is {session['audit_length']}, precondition was {expected_audit_length}"
                )
            now = _now()
            self._db.execute(
                "INSERT INTO edits (study_id, edited_at, text) VALUES (?, ?, ?)", (study_id, now, text)
            )
            self._db.execute(
                "UPDATE sessions SET draft = ?, updated_at = ? WHERE study_id = ?", (text, now, study_id)
            )
            self._db.commit()
        return self.get_session(study_id)

    def finalize(self, study_id: str) -> dict:
        with self._lock:
            session = self.get_session(study_id)
            if session["status"] == STATUS_FINALIZED:
                raise SessionFinalized(study_id)
            self._db.execute(
                "UPDATE sessions SET status = ?, updated_at = ? WHERE study_id = ?",
                (STATUS_FINALIZED, _now(), study_id),
            )
            self._db.commit()
        return self.get_session(study_id)
