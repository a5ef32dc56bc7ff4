"""Snapshot images, value normalization and content digests.

A snapshot is an immutable single-file SQLite database image held as bytes.
All content-level operations (digests, canonical row extraction) read through
a short-lived connection; Python 3.10 lacks ``Connection.serialize`` so the
bytes travel through temp files and the backup API.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import os
import sqlite3
import tempfile
from dataclasses import dataclass, field


def quote_ident(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


@dataclass(frozen=True)
class ColumnInfo:
    name: str
    decl_type: str
    notnull: bool
    default: object
    primary_key: bool


@dataclass(frozen=True)
class ForeignKey:
    column: str
    ref_table: str
    ref_column: str


@contextlib.contextmanager
def temp_db_path(data: bytes | None = None):
    """Yield a temp file path holding ``data`` (or empty), removed afterwards."""
    fd, path = tempfile.mkstemp(suffix=".db", prefix="policygym-")
    try:
        with os.fdopen(fd, "wb") as fh:
            if data:
                fh.write(data)
        yield path
    finally:
        for suffix in ("", "-journal", "-wal", "-shm"):
            try:
                os.unlink(path + suffix)
            except FileNotFoundError:
                pass


@dataclass(frozen=True)
class Snapshot:
    """Immutable relational database image (SQLite main-db file bytes)."""

    data: bytes = field(repr=False)

    @classmethod
    def from_file(cls, path) -> "Snapshot":
        with open(path, "rb") as fh:
            return cls(fh.read())

    @classmethod
    def from_connection(cls, conn: sqlite3.Connection) -> "Snapshot":
        # backup() captures a consistent image even with dirty pages in flight
        with temp_db_path() as path:
            dest = sqlite3.connect(path)
            try:
                conn.backup(dest)
                dest.commit()
            finally:
                dest.close()
            with open(path, "rb") as fh:
                return cls(fh.read())

    def write_to(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.data)

    @contextlib.contextmanager
    def connect(self):
        """Read-only connection onto a scratch copy of the image."""
        with temp_db_path(self.data) as path:
            conn = sqlite3.connect(path)
            try:
                yield conn
            finally:
                conn.close()

    def digest(self) -> str:
        with self.connect() as conn:
            return state_digest(conn)


# --- schema introspection ----------------------------------------------------

def list_tables(conn: sqlite3.Connection) -> list[str]:
    rows = conn.execute(
        "SELECT name FROM sqlite_master"
        " WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name"
    ).fetchall()
    return [r[0] for r in rows]


def table_columns(conn: sqlite3.Connection, table: str) -> list[ColumnInfo]:
    rows = conn.execute(f"PRAGMA table_info({quote_ident(table)})").fetchall()
    return [
        ColumnInfo(name=r[1], decl_type=(r[2] or ""), notnull=bool(r[3]),
                   default=r[4], primary_key=bool(r[5]))
        for r in rows
    ]


def foreign_keys(conn: sqlite3.Connection, table: str) -> list[ForeignKey]:
    out = []
    for r in conn.execute(f"PRAGMA foreign_key_list({quote_ident(table)})"):
        # columns: id, seq, table, from, to, on_update, on_delete, match
        ref_col = r[4]
        if ref_col is None:
            # implicit reference to the parent's primary key
            parents = [c.name for c in table_columns(conn, r[2]) if c.primary_key]
            ref_col = parents[0] if parents else "rowid"
        out.append(ForeignKey(column=r[3], ref_table=r[2], ref_column=ref_col))
    return out


def is_autoincrement(conn: sqlite3.Connection, table: str) -> bool:
    row = conn.execute(
        "SELECT sql FROM sqlite_master WHERE type = 'table' AND name = ?", (table,)
    ).fetchone()
    return bool(row and row[0] and "AUTOINCREMENT" in row[0].upper())


def table_sql(conn: sqlite3.Connection, table: str) -> str:
    row = conn.execute(
        "SELECT sql FROM sqlite_master WHERE type = 'table' AND name = ?", (table,)
    ).fetchone()
    return row[0] if row and row[0] else ""


# --- value normalization -------------------------------------------------------

def normalize_value(value, float_decimals: int | None = None):
    """Collapse storage-class artifacts: integral REALs equal INTEGERs, NaN is NULL.

    Idempotent: normalize(normalize(v)) == normalize(v).
    """
    if value is None or isinstance(value, (str, bytes)):
        return value
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if float_decimals is not None and math.isfinite(value):
            value = round(value, float_decimals)
        if math.isfinite(value) and value == int(value):
            return int(value)
        return value
    return value


def encode_value(value) -> bytes:
    """Stable byte encoding of a normalized value, used for row ordering."""
    if value is None:
        return b"n"
    if isinstance(value, int):
        return b"i" + str(value).encode()
    if isinstance(value, float):
        return b"f" + repr(value).encode()
    if isinstance(value, str):
        return b"s" + value.encode("utf-8", "surrogatepass")
    if isinstance(value, bytes):
        return b"b" + value
    return b"o" + repr(value).encode()


def row_sort_key(row: tuple) -> bytes:
    parts = []
    for v in row:
        token = encode_value(v)
        parts.append(str(len(token)).encode() + b":" + token)
    return b"|".join(parts)


# --- content digest ---------------------------------------------------------------

def state_digest(conn: sqlite3.Connection) -> str:
    """256-bit content hash of the full database state.

    Canonical dump: user tables sorted by name, every column in schema order,
    rows sorted by full-tuple byte order. Physical row order and file layout
    do not affect the digest.
    """
    h = hashlib.sha256()
    for table in list_tables(conn):
        cols = [c.name for c in table_columns(conn, table)]
        h.update(b"T" + table.encode() + b"\x00" + ",".join(cols).encode() + b"\x00")
        select = "SELECT {} FROM {}".format(
            ", ".join(quote_ident(c) for c in cols), quote_ident(table)
        )
        keys = sorted(row_sort_key(tuple(normalize_value(v) for v in row))
                      for row in conn.execute(select))
        for key in keys:
            h.update(b"R" + key + b"\x00")
    return h.hexdigest()
