"""Task package model: loading, validation, tool derivation and round-tripping.

A package is a directory:

    manifest.json   {name, domain, permissions, diff_config, limits,
                     redaction_list[, error_registry]}
    policy.md       natural-language business rules handed to the agent
    task.md         spoiler-free task description driving the user simulator
    schema.sql      table definitions
    triggers.sql    trigger definitions (the hard-compiled rules)
    origin.db       initial snapshot (SQLite image)
    target.db       goal snapshot (SQLite image)
    tools.json      derived tool catalog (cache; regenerated on save)

Packages are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import json
import re
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    CompileFailure,
    InvalidManifest,
    IoFailure,
    MissingArtifact,
    SchemaMismatch,
    SpoilerLeak,
)
from .snapshots import (
    ColumnInfo,
    Snapshot,
    list_tables,
    quote_ident,
    table_columns,
)
from .verify import DiffConfig, diff, validate_excluded_columns

READ_ONLY = "read_only"
READ_WRITE = "read_write"

ESCALATION_TOOL = "transfer_to_human_agents"
ESCALATIONS_TABLE = "escalations"
ESCALATIONS_DDL = (
    "CREATE TABLE escalations (\n"
    "    id INTEGER PRIMARY KEY AUTOINCREMENT,\n"
    "    summary TEXT NOT NULL\n"
    ")"
)

QUERY_OPERATORS = ("=", "!=", "<", "<=", ">", ">=")

DEFAULT_STOP_TOKEN = "###STOP###"
DEFAULT_MAX_TURNS = 50

REQUIRED_FILES = (
    "manifest.json",
    "policy.md",
    "task.md",
    "schema.sql",
    "triggers.sql",
    "origin.db",
    "target.db",
)

_TRIGGER_HEADER_RE = re.compile(
    r"CREATE\s+TRIGGER\s+(?:IF\s+NOT\s+EXISTS\s+)?[\"'`]?(\w+)[\"'`]?\s+"
    r"(BEFORE|AFTER|INSTEAD\s+OF)\s+(INSERT|UPDATE|DELETE)"
    r"(?:\s+OF\s+([\w\s,\"']+?))?\s+ON\s+[\"'`]?(\w+)",
    re.IGNORECASE | re.DOTALL,
)
_RAISE_RE = re.compile(r"RAISE\s*\(\s*(?:ABORT|FAIL|ROLLBACK)\s*,\s*'((?:[^']|'')*)'", re.IGNORECASE)
_EFFECT_UPDATE_RE = re.compile(r"\bUPDATE\s+[\"'`]?(\w+)[\"'`]?\s+SET\s+[\"'`]?(\w+)", re.IGNORECASE)
_EFFECT_INSERT_RE = re.compile(r"\bINSERT\s+INTO\s+[\"'`]?(\w+)", re.IGNORECASE)
_ERROR_CODE_RE = re.compile(r"\[([A-Z][A-Z0-9_]*)\]")


@dataclass(frozen=True)
class RolloutLimits:
    max_turns: int = DEFAULT_MAX_TURNS
    stop_token: str = DEFAULT_STOP_TOKEN

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if not self.stop_token:
            raise ValueError("stop_token must be non-empty")

    def to_json(self) -> dict:
        return {"max_turns": self.max_turns, "stop_token": self.stop_token}

    @classmethod
    def from_json(cls, doc: dict) -> "RolloutLimits":
        return cls(
            max_turns=doc.get("max_turns", DEFAULT_MAX_TURNS),
            stop_token=doc.get("stop_token", DEFAULT_STOP_TOKEN),
        )


@dataclass(frozen=True)
class ToolSpec:
    """One agent-facing tool: an atomic insert/query/update or the escalation."""

    name: str
    kind: str  # insert | query | update | escalation
    table: str | None
    parameter_schema: dict
    description: str
    preconditions: tuple[str, ...] = ()
    side_effects: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "table": self.table,
            "parameter_schema": self.parameter_schema,
            "description": self.description,
            "preconditions": list(self.preconditions),
            "side_effects": list(self.side_effects),
        }


@dataclass(frozen=True)
class EnvironmentBundle:
    """Hard-compiled environment: DDL, permissions, tools and the error registry."""

    schema: str
    triggers: str
    permissions: dict[str, str]
    tool_catalog: tuple[ToolSpec, ...]
    error_registry: dict[str, str] = field(default_factory=dict)

    def tools_by_name(self) -> dict[str, ToolSpec]:
        return {t.name: t for t in self.tool_catalog}

    def tables(self, mode: str) -> list[str]:
        return sorted(t for t, m in self.permissions.items() if m == mode)


@dataclass(frozen=True)
class TaskPackage:
    """Self-contained task unit: policy, task text, environment and both snapshots."""

    name: str
    domain: str
    policy_doc: str
    task_description: str
    env: EnvironmentBundle
    origin_snapshot: Snapshot
    target_snapshot: Snapshot
    diff_config: DiffConfig
    limits: RolloutLimits
    redaction_list: tuple[str, ...] = ()
    delta0: int = 0

    @property
    def trivial(self) -> bool:
        """True when origin already equals target (degenerate no-op task)."""
        return self.delta0 == 0


# --- compilation ------------------------------------------------------------

def compile_environment(
    schema_sql: str, triggers_sql: str, conn: sqlite3.Connection | None = None
) -> sqlite3.Connection:
    """Execute the DDL on a scratch (or given) engine; raise CompileFailure.

    The escalations log table is added when the schema does not declare it.
    Trigger bodies are force-compiled with EXPLAIN probes because SQLite
    resolves trigger references lazily at first fire.
    """
    own = conn is None
    if conn is None:
        conn = sqlite3.connect(":memory:")
    try:
        try:
            conn.executescript(schema_sql)
        except sqlite3.Error as exc:
            raise CompileFailure(f"schema: {exc}") from exc
        if ESCALATIONS_TABLE not in list_tables(conn):
            conn.execute(ESCALATIONS_DDL)
        try:
            if triggers_sql.strip():
                conn.executescript(triggers_sql)
        except sqlite3.Error as exc:
            raise CompileFailure(f"triggers: {exc}") from exc
        _force_compile_triggers(conn)
        conn.commit()
    except CompileFailure:
        if own:
            conn.close()
        raise
    return conn


def _force_compile_triggers(conn: sqlite3.Connection) -> None:
    rows = conn.execute(
        "SELECT name, sql FROM sqlite_master WHERE type = 'trigger'"
    ).fetchall()
    for name, sql in rows:
        m = _TRIGGER_HEADER_RE.search(sql or "")
        if not m:
            continue
        event, of_cols, table = m.group(3).upper(), m.group(4), m.group(5)
        qt = quote_ident(table)
        try:
            if event == "INSERT":
                conn.execute(f"EXPLAIN INSERT INTO {qt} DEFAULT VALUES")
            elif event == "UPDATE":
                cols = [c.strip().strip('"') for c in of_cols.split(",")] if of_cols else []
                if not cols:
                    cols = [table_columns(conn, table)[0].name]
                sets = ", ".join(f"{quote_ident(c)} = {quote_ident(c)}" for c in cols)
                conn.execute(f"EXPLAIN UPDATE {qt} SET {sets}")
            else:
                conn.execute(f"EXPLAIN DELETE FROM {qt}")
        except sqlite3.Error as exc:
            raise CompileFailure(f"trigger {name}: {exc}") from exc


def trigger_names(conn: sqlite3.Connection) -> list[str]:
    rows = conn.execute(
        "SELECT name FROM sqlite_master WHERE type = 'trigger' ORDER BY name"
    ).fetchall()
    return [r[0] for r in rows]


# --- trigger annotations -------------------------------------------------------

def extract_trigger_annotations(conn: sqlite3.Connection) -> dict:
    """Mechanical annotation extraction from compiled triggers.

    Each RAISE message in a BEFORE trigger becomes a precondition line of the
    matching insert/update tool; each statement in an AFTER trigger becomes a
    side-effect line. No paraphrase, so derivation stays deterministic.
    """
    ann: dict[str, dict[str, dict[str, list[str]]]] = {}
    rows = conn.execute(
        "SELECT name, sql FROM sqlite_master WHERE type = 'trigger' ORDER BY rowid"
    ).fetchall()
    for _, sql in rows:
        m = _TRIGGER_HEADER_RE.search(sql or "")
        if not m:
            continue
        timing = m.group(2).upper()
        event = m.group(3).lower()
        table = m.group(5)
        if event not in ("insert", "update"):
            continue
        slot = ann.setdefault(table, {}).setdefault(
            event, {"preconditions": [], "side_effects": []}
        )
        body = sql[m.end():]
        if timing == "BEFORE":
            for msg in _RAISE_RE.findall(body):
                slot["preconditions"].append(msg.replace("''", "'"))
        elif timing == "AFTER":
            for target, col in _EFFECT_UPDATE_RE.findall(body):
                slot["side_effects"].append(f"updates {target}.{col}")
            for target in _EFFECT_INSERT_RE.findall(body):
                slot["side_effects"].append(f"may insert into {target}")
    return ann


def harvest_error_codes(triggers_sql: str) -> list[str]:
    """All distinct bracketed error codes appearing in trigger text."""
    seen: dict[str, None] = {}
    for code in _ERROR_CODE_RE.findall(triggers_sql):
        seen.setdefault(code, None)
    return list(seen)


# --- tool derivation ------------------------------------------------------------

def _json_type(decl: str) -> str:
    decl = (decl or "").upper()
    if "INT" in decl:
        return "integer"
    if any(tok in decl for tok in ("CHAR", "CLOB", "TEXT")):
        return "string"
    if "BLOB" in decl or decl == "":
        return "string"
    return "number"


def _is_auto_key(col: ColumnInfo) -> bool:
    return col.primary_key and "INT" in (col.decl_type or "").upper()


def _insert_schema(cols: list[ColumnInfo]) -> dict:
    properties = {}
    required = []
    for col in cols:
        prop: dict = {"type": _json_type(col.decl_type)}
        notes = []
        if _is_auto_key(col):
            notes.append("auto-assigned; omit unless you must override")
        if col.default is not None:
            notes.append(f"defaults to {col.default}")
        if notes:
            prop["description"] = "; ".join(notes)
        properties[col.name] = prop
        if (col.notnull or col.primary_key) and col.default is None and not _is_auto_key(col):
            required.append(col.name)
    return {"type": "object", "properties": properties, "required": required}


def _query_schema(cols: list[ColumnInfo]) -> dict:
    names = [c.name for c in cols]
    return {
        "type": "object",
        "properties": {
            "filters": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "column": {"type": "string", "enum": names},
                        "op": {"type": "string", "enum": list(QUERY_OPERATORS)},
                        "value": {},
                    },
                    "required": ["column", "op", "value"],
                },
            },
            "order_by": {
                "type": "object",
                "properties": {
                    "column": {"type": "string", "enum": names},
                    "direction": {"type": "string", "enum": ["asc", "desc"]},
                },
                "required": ["column"],
            },
            "limit": {"type": "integer"},
        },
        "required": [],
    }


def _update_schema(cols: list[ColumnInfo]) -> dict:
    names = [c.name for c in cols]
    col_props = {name: {} for name in names}
    return {
        "type": "object",
        "properties": {
            "filters": {
                "type": "object",
                "properties": dict(col_props),
                "additionalProperties": False,
                "description": "equality filters; rows matching every entry are updated",
            },
            "set": {
                "type": "object",
                "properties": dict(col_props),
                "additionalProperties": False,
            },
        },
        "required": ["filters", "set"],
    }


def _compose_description(base: str, pre: list[str], post: list[str]) -> str:
    parts = [base]
    if pre:
        parts.append("Preconditions: " + " | ".join(pre))
    if post:
        parts.append("Side effects: " + " | ".join(post))
    return " ".join(parts)


def derive_tools_from_connection(
    conn: sqlite3.Connection, permissions: dict[str, str], annotations: dict
) -> tuple[ToolSpec, ...]:
    tools: list[ToolSpec] = []
    known = set(list_tables(conn))
    for table in sorted(permissions):
        if table not in known:
            raise SchemaMismatch(f"permission entry for unknown table: {table}")

    for table in sorted(permissions):
        cols = table_columns(conn, table)
        tools.append(
            ToolSpec(
                name=f"query_{table}",
                kind="query",
                table=table,
                parameter_schema=_query_schema(cols),
                description=f"Read rows from the {table} table with conjunctive filters.",
            )
        )
    for table in sorted(t for t, m in permissions.items() if m == READ_WRITE):
        cols = table_columns(conn, table)
        ins = annotations.get(table, {}).get("insert", {})
        upd = annotations.get(table, {}).get("update", {})
        tools.append(
            ToolSpec(
                name=f"insert_{table}",
                kind="insert",
                table=table,
                parameter_schema=_insert_schema(cols),
                description=_compose_description(
                    f"Insert one row into the {table} table.",
                    ins.get("preconditions", []),
                    ins.get("side_effects", []),
                ),
                preconditions=tuple(ins.get("preconditions", [])),
                side_effects=tuple(ins.get("side_effects", [])),
            )
        )
        tools.append(
            ToolSpec(
                name=f"update_{table}",
                kind="update",
                table=table,
                parameter_schema=_update_schema(cols),
                description=_compose_description(
                    f"Update rows of the {table} table matching equality filters.",
                    upd.get("preconditions", []),
                    upd.get("side_effects", []),
                ),
                preconditions=tuple(upd.get("preconditions", [])),
                side_effects=tuple(upd.get("side_effects", [])),
            )
        )
    tools.append(
        ToolSpec(
            name=ESCALATION_TOOL,
            kind="escalation",
            table=ESCALATIONS_TABLE,
            parameter_schema={
                "type": "object",
                "properties": {"summary": {"type": "string"}},
                "required": ["summary"],
            },
            description="Escalate to a human agent; records the summary in the escalations log.",
        )
    )
    return tuple(tools)


def derive_tools(
    schema: str, permissions: dict[str, str], trigger_annotations: dict | None = None,
    triggers: str = "",
) -> tuple[ToolSpec, ...]:
    """Derive the atomic tool catalog from DDL text.

    One insert/query/update per read-write table, one query per read-only
    table, plus the escalation tool. Delete is never derived; lifecycle
    changes go through status updates.
    """
    conn = compile_environment(schema, triggers)
    try:
        ann = trigger_annotations
        if ann is None:
            ann = extract_trigger_annotations(conn)
        return derive_tools_from_connection(conn, permissions, ann)
    finally:
        conn.close()


# --- spoiler check -----------------------------------------------------------------

def find_spoiler(task_text: str, tool_names, redaction_list) -> str | None:
    """First forbidden token appearing in the task text, or None.

    Pure function of its inputs; matching is case-insensitive on word
    boundaries so natural words are not flagged inside larger words.
    """
    for token in list(tool_names) + list(redaction_list):
        if not token:
            continue
        if re.search(rf"(?<!\w){re.escape(token)}(?!\w)", task_text, re.IGNORECASE):
            return token
    return None


# --- load / save -------------------------------------------------------------------

def _snapshot_shape(conn: sqlite3.Connection) -> dict[str, dict[str, str]]:
    shape = {}
    for table in list_tables(conn):
        shape[table] = {c.name: (c.decl_type or "").upper() for c in table_columns(conn, table)}
    return shape


def _check_snapshot_conforms(snap: Snapshot, want: dict, label: str) -> None:
    with snap.connect() as conn:
        have = _snapshot_shape(conn)
    for table, cols in want.items():
        if table not in have:
            raise SchemaMismatch(f"{label}: missing table {table}")
        if have[table] != cols:
            raise SchemaMismatch(f"{label}: column mismatch in table {table}")
    extra = set(have) - set(want)
    if extra:
        raise SchemaMismatch(f"{label}: unexpected table {sorted(extra)[0]}")


def check_snapshot_schema(pkg: TaskPackage, snap: Snapshot, label: str = "snapshot") -> None:
    """Raise SchemaMismatch unless ``snap`` conforms to the package schema."""
    conn = compile_environment(pkg.env.schema, pkg.env.triggers)
    try:
        shape = _snapshot_shape(conn)
    finally:
        conn.close()
    _check_snapshot_conforms(snap, shape, label)


def load_package(path) -> TaskPackage:
    """Load and fully validate a package directory."""
    root = Path(path)
    if not root.is_dir():
        raise MissingArtifact(f"package directory not found: {root}")
    for fname in REQUIRED_FILES:
        if not (root / fname).is_file():
            raise MissingArtifact(fname)

    try:
        manifest = json.loads((root / "manifest.json").read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidManifest(f"manifest.json: {exc}") from exc
    if not isinstance(manifest, dict):
        raise InvalidManifest("manifest.json: top-level object expected")

    try:
        diff_config = DiffConfig.from_json(manifest.get("diff_config", {}))
        limits = RolloutLimits.from_json(manifest.get("limits", {}))
    except ValueError as exc:
        raise InvalidManifest(str(exc)) from exc
    permissions = manifest.get("permissions", {})
    for table, mode in permissions.items():
        if mode not in (READ_ONLY, READ_WRITE):
            raise InvalidManifest(f"bad permission mode for {table}: {mode!r}")
    redaction_list = tuple(manifest.get("redaction_list", []))
    registry = dict(manifest.get("error_registry", {}))

    policy_doc = (root / "policy.md").read_text("utf-8")
    task_description = (root / "task.md").read_text("utf-8")
    schema_sql = (root / "schema.sql").read_text("utf-8")
    triggers_sql = (root / "triggers.sql").read_text("utf-8")
    if not policy_doc.strip():
        raise MissingArtifact("policy.md is empty")

    conn = compile_environment(schema_sql, triggers_sql)
    try:
        shape = _snapshot_shape(conn)
        for table in shape:
            if table != ESCALATIONS_TABLE and table not in permissions:
                raise SchemaMismatch(f"no permission entry for table {table}")
        annotations = extract_trigger_annotations(conn)
        catalog = derive_tools_from_connection(conn, permissions, annotations)
        validate_excluded_columns(conn, diff_config)
    finally:
        conn.close()

    if not registry:
        registry = {code: "" for code in harvest_error_codes(triggers_sql)}

    origin = Snapshot.from_file(root / "origin.db")
    target = Snapshot.from_file(root / "target.db")
    _check_snapshot_conforms(origin, shape, "origin.db")
    _check_snapshot_conforms(target, shape, "target.db")

    leak = find_spoiler(task_description, [t.name for t in catalog], redaction_list)
    if leak is not None:
        raise SpoilerLeak(f"task description mentions {leak!r}")

    env = EnvironmentBundle(
        schema=schema_sql,
        triggers=triggers_sql,
        permissions=dict(permissions),
        tool_catalog=catalog,
        error_registry=registry,
    )
    delta0 = diff(origin, target, diff_config).total
    return TaskPackage(
        name=manifest.get("name", root.name),
        domain=manifest.get("domain", ""),
        policy_doc=policy_doc,
        task_description=task_description,
        env=env,
        origin_snapshot=origin,
        target_snapshot=target,
        diff_config=diff_config,
        limits=limits,
        redaction_list=redaction_list,
        delta0=delta0,
    )


def save_package(pkg: TaskPackage, path) -> None:
    """Write a package directory such that load_package round-trips it."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "name": pkg.name,
            "domain": pkg.domain,
            "permissions": dict(sorted(pkg.env.permissions.items())),
            "diff_config": pkg.diff_config.to_json(),
            "limits": pkg.limits.to_json(),
            "redaction_list": list(pkg.redaction_list),
            "error_registry": dict(sorted(pkg.env.error_registry.items())),
        }
        (root / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8"
        )
        (root / "policy.md").write_text(pkg.policy_doc, "utf-8")
        (root / "task.md").write_text(pkg.task_description, "utf-8")
        (root / "schema.sql").write_text(pkg.env.schema, "utf-8")
        (root / "triggers.sql").write_text(pkg.env.triggers, "utf-8")
        pkg.origin_snapshot.write_to(root / "origin.db")
        pkg.target_snapshot.write_to(root / "target.db")
        (root / "tools.json").write_text(
            json.dumps([t.to_json() for t in pkg.env.tool_catalog], indent=2) + "\n",
            "utf-8",
        )
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
