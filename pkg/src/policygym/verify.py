"""State verification: canonical relation sets, symmetric-difference distance,
binary success, proximity and dense incremental rewards.

All functions are pure over immutable snapshots and safe to call from any
number of threads.
"""

from __future__ import annotations

import hashlib
import re
import sqlite3
from collections import Counter
from dataclasses import dataclass, field

from .errors import SchemaMismatch, UnknownExcludedColumn
from .snapshots import (
    Snapshot,
    foreign_keys,
    list_tables,
    normalize_value,
    quote_ident,
    row_sort_key,
    table_columns,
)

DEFAULT_EPSILON = 1e-9
DEFAULT_LAMBDA_ERR = 0.1

_ROUNDED_RE = re.compile(r"^rounded\((\d+)\)$")


@dataclass(frozen=True)
class DiffConfig:
    """Knobs governing snapshot comparison and reward shaping.

    ``excluded_columns`` names the technical key columns (auto ids, timestamps)
    that carry no business meaning. ``fk_mode`` decides what happens to foreign
    keys pointing at excluded columns: ``drop`` removes the referencing column
    too, ``canonical_remap`` replaces its value with a content hash of the
    referenced row.
    """

    excluded_columns: dict[str, frozenset[str]] = field(default_factory=dict)
    fk_mode: str = "drop"
    epsilon: float = DEFAULT_EPSILON
    lambda_err: float = DEFAULT_LAMBDA_ERR
    float_compare: str = "exact"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.lambda_err <= 0:
            raise ValueError("lambda_err must be > 0")
        if self.fk_mode not in ("drop", "canonical_remap"):
            raise ValueError(f"unknown fk_mode: {self.fk_mode!r}")
        if self.float_compare != "exact" and not _ROUNDED_RE.match(self.float_compare):
            raise ValueError(f"unknown float_compare: {self.float_compare!r}")
        # normalize plain sets coming from manifests
        object.__setattr__(
            self,
            "excluded_columns",
            {t: frozenset(cols) for t, cols in self.excluded_columns.items()},
        )

    @property
    def float_decimals(self) -> int | None:
        m = _ROUNDED_RE.match(self.float_compare)
        return int(m.group(1)) if m else None

    def to_json(self) -> dict:
        return {
            "excluded_columns": {t: sorted(cols) for t, cols in sorted(self.excluded_columns.items())},
            "fk_mode": self.fk_mode,
            "epsilon": self.epsilon,
            "lambda_err": self.lambda_err,
            "float_compare": self.float_compare,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DiffConfig":
        return cls(
            excluded_columns={t: frozenset(c) for t, c in doc.get("excluded_columns", {}).items()},
            fk_mode=doc.get("fk_mode", "drop"),
            epsilon=doc.get("epsilon", DEFAULT_EPSILON),
            lambda_err=doc.get("lambda_err", DEFAULT_LAMBDA_ERR),
            float_compare=doc.get("float_compare", "exact"),
        )


@dataclass(frozen=True)
class CanonicalRelationSet:
    """Per-table multisets of canonical row tuples.

    Canonicalization removes excluded columns, normalizes values, and is
    independent of physical row order and auto-assigned key values.
    """

    tables: dict[str, Counter]
    columns: dict[str, tuple[str, ...]]

    def row_count(self, table: str) -> int:
        return sum(self.tables.get(table, Counter()).values())


@dataclass(frozen=True)
class TableDelta:
    columns: tuple[str, ...]
    added: tuple[tuple, ...]
    removed: tuple[tuple, ...]


@dataclass(frozen=True)
class SnapshotDiff:
    """Per-table added/removed canonical rows plus the symmetric-difference total."""

    per_table: dict[str, TableDelta]
    total: int

    def render_text(self) -> str:
        lines = []
        for table in sorted(self.per_table):
            delta = self.per_table[table]
            if not delta.added and not delta.removed:
                continue
            lines.append(f"table {table} ({', '.join(delta.columns)})")
            for row in delta.removed:
                lines.append(f"  - {row!r}")
            for row in delta.added:
                lines.append(f"  + {row!r}")
        lines.append(f"total {self.total}")
        return "\n".join(lines)


def validate_excluded_columns(conn: sqlite3.Connection, cfg: DiffConfig) -> None:
    tables = set(list_tables(conn))
    for table, cols in cfg.excluded_columns.items():
        if table not in tables:
            raise UnknownExcludedColumn(f"excluded table not in schema: {table}")
        have = {c.name for c in table_columns(conn, table)}
        for col in cols:
            if col not in have:
                raise UnknownExcludedColumn(f"excluded column not in schema: {table}.{col}")


def _dropped_fk_columns(conn: sqlite3.Connection, table: str, cfg: DiffConfig) -> set[str]:
    dropped = set()
    for fk in foreign_keys(conn, table):
        parent_excluded = cfg.excluded_columns.get(fk.ref_table, frozenset())
        if fk.ref_column in parent_excluded:
            dropped.add(fk.column)
    return dropped


def _remap_digest(row: tuple) -> str:
    return hashlib.sha256(row_sort_key(row)).hexdigest()[:16]


def canonicalize_connection(conn: sqlite3.Connection, cfg: DiffConfig) -> CanonicalRelationSet:
    """Canonical relation set of the live database behind ``conn``."""
    validate_excluded_columns(conn, cfg)
    decimals = cfg.float_decimals
    tables: dict[str, Counter] = {}
    columns: dict[str, tuple[str, ...]] = {}

    # In canonical_remap mode, precompute ref-row hashes for every parent
    # column that some foreign key points at through an excluded key.
    remap: dict[tuple[str, str], dict] = {}
    if cfg.fk_mode == "canonical_remap":
        targets = set()
        for table in list_tables(conn):
            for fk in foreign_keys(conn, table):
                if fk.ref_column in cfg.excluded_columns.get(fk.ref_table, frozenset()):
                    targets.add((fk.ref_table, fk.ref_column))
        for ref_table, ref_column in targets:
            cols = table_columns(conn, ref_table)
            excluded = cfg.excluded_columns.get(ref_table, frozenset())
            own_fks = {fk.column for fk in foreign_keys(conn, ref_table)}
            keep = [c.name for c in cols if c.name not in excluded and c.name not in own_fks]
            mapping = {}
            select = "SELECT {}, {} FROM {}".format(
                quote_ident(ref_column),
                ", ".join(quote_ident(c) for c in keep) if keep else "NULL",
                quote_ident(ref_table),
            )
            for row in conn.execute(select):
                key = normalize_value(row[0], decimals)
                content = tuple(normalize_value(v, decimals) for v in row[1:])
                mapping[key] = _remap_digest(content)
            remap[(ref_table, ref_column)] = mapping

    for table in list_tables(conn):
        cols = table_columns(conn, table)
        excluded = cfg.excluded_columns.get(table, frozenset())
        fk_by_column = {fk.column: fk for fk in foreign_keys(conn, table)}
        dropped = _dropped_fk_columns(conn, table, cfg) if cfg.fk_mode == "drop" else set()
        kept = [c.name for c in cols if c.name not in excluded and c.name not in dropped]
        columns[table] = tuple(kept)
        counter: Counter = Counter()
        if kept:
            select = "SELECT {} FROM {}".format(
                ", ".join(quote_ident(c) for c in kept), quote_ident(table)
            )
            for raw in conn.execute(select):
                values = []
                for name, value in zip(kept, raw):
                    value = normalize_value(value, decimals)
                    fk = fk_by_column.get(name)
                    if (
                        cfg.fk_mode == "canonical_remap"
                        and fk is not None
                        and (fk.ref_table, fk.ref_column) in remap
                    ):
                        if value is not None:
                            value = remap[(fk.ref_table, fk.ref_column)].get(
                                value, f"unresolved:{value!r}"
                            )
                    values.append(value)
                counter[tuple(values)] += 1
        else:
            # all columns excluded: rows collapse to empty tuples, count kept
            n = conn.execute(f"SELECT COUNT(*) FROM {quote_ident(table)}").fetchone()[0]
            if n:
                counter[()] = n
        tables[table] = counter
    return CanonicalRelationSet(tables=tables, columns=columns)


def canonicalize(snapshot: Snapshot, cfg: DiffConfig) -> CanonicalRelationSet:
    """Canonical relation set of a snapshot (NULL equals only NULL)."""
    with snapshot.connect() as conn:
        return canonicalize_connection(conn, cfg)


def diff_canonical(a: CanonicalRelationSet, b: CanonicalRelationSet) -> SnapshotDiff:
    """Multiset symmetric difference between two canonical relation sets."""
    if set(a.tables) != set(b.tables):
        missing = set(a.tables) ^ set(b.tables)
        raise SchemaMismatch(f"table sets differ: {sorted(missing)}")
    per_table = {}
    total = 0
    for table in a.tables:
        if a.columns[table] != b.columns[table]:
            raise SchemaMismatch(f"column sets differ for table: {table}")
        removed_counter = a.tables[table] - b.tables[table]
        added_counter = b.tables[table] - a.tables[table]
        removed = tuple(sorted(removed_counter.elements(), key=row_sort_key))
        added = tuple(sorted(added_counter.elements(), key=row_sort_key))
        per_table[table] = TableDelta(columns=a.columns[table], added=added, removed=removed)
        total += len(removed) + len(added)
    return SnapshotDiff(per_table=per_table, total=total)


def diff(a: Snapshot, b: Snapshot, cfg: DiffConfig) -> SnapshotDiff:
    """Symmetric-difference distance between snapshots ``a`` and ``b``.

    ``removed`` rows are present only in ``a``, ``added`` rows only in ``b``;
    an updated row therefore counts 2 (one removed plus one added tuple).
    """
    return diff_canonical(canonicalize(a, cfg), canonicalize(b, cfg))


def final_reward(d: SnapshotDiff) -> int:
    """Binary success: 1 iff the symmetric difference is empty."""
    return 1 if d.total == 0 else 0


def proximity(d_t: int, delta0: int, eps: float) -> float:
    """Normalized closeness to the target state, in [0, 1].

    ``delta0`` is the origin-to-target distance. A degenerate task with
    delta0 = 0 scores 1 only while the state still matches the target.
    """
    if d_t < 0 or delta0 < 0:
        raise ValueError("distances must be non-negative")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if delta0 == 0:
        return 1.0 if d_t == 0 else 0.0
    return 1.0 - min(d_t, delta0) / (delta0 + eps)


def dense_reward(p_t: float, p_prev: float, violation: bool, lambda_err: float) -> float:
    """Per-turn incremental reward: proximity delta, or -lambda_err on violation."""
    if lambda_err <= 0:
        raise ValueError("lambda_err must be > 0")
    if violation:
        return -lambda_err
    return p_t - p_prev
