"""Live environment execution: transactional tool calls against a working
snapshot with triggers enforced, and engine-abort-to-payload translation.

One EnvHandle is single-writer; distinct handles are fully independent.
"""

from __future__ import annotations

import os
import re
import sqlite3
import tempfile
from dataclasses import dataclass

from .errors import MalformedArguments, ReadOnlyTable, UnknownTool
from .packages import (
    QUERY_OPERATORS,
    READ_ONLY,
    EnvironmentBundle,
    TaskPackage,
    ToolSpec,
)
from .snapshots import Snapshot, quote_ident, state_digest, table_columns

UNCLASSIFIED = "UNCLASSIFIED"

_BRACKET_CODE_RE = re.compile(r"^\s*\[([A-Z][A-Z0-9_]*)\]\s*(.*)$", re.DOTALL)


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: dict

    def to_json(self) -> dict:
        return {"tool_name": self.tool_name, "arguments": self.arguments}

    @classmethod
    def from_json(cls, doc: dict) -> "ToolCall":
        return cls(tool_name=doc["tool_name"], arguments=dict(doc.get("arguments", {})))


@dataclass(frozen=True)
class ErrorPayload:
    code: str
    message: str
    violated_rule: str = ""
    hint: str = ""

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "message": self.message,
            "violated_rule": self.violated_rule,
            "hint": self.hint,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ErrorPayload":
        return cls(
            code=doc["code"],
            message=doc.get("message", ""),
            violated_rule=doc.get("violated_rule", ""),
            hint=doc.get("hint", ""),
        )


@dataclass(frozen=True)
class ToolResult:
    status: str  # success | error
    rows: tuple = ()
    affected: int = 0
    error: ErrorPayload | None = None
    state_digest: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "rows": [dict(r) for r in self.rows],
            "affected": self.affected,
            "error": self.error.to_json() if self.error else None,
            "state_digest": self.state_digest,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ToolResult":
        err = doc.get("error")
        return cls(
            status=doc["status"],
            rows=tuple(doc.get("rows", [])),
            affected=doc.get("affected", 0),
            error=ErrorPayload.from_json(err) if err else None,
            state_digest=doc.get("state_digest", ""),
        )


def parse_engine_error(raw: str, registry: dict[str, str]) -> ErrorPayload:
    """Translate a raw engine message into the structured error payload.

    Messages following the '[CODE] rule text' convention keep their code and
    rule; everything else becomes UNCLASSIFIED with the message verbatim.
    """
    m = _BRACKET_CODE_RE.match(raw)
    if m:
        code, rule = m.group(1), m.group(2).strip()
        return ErrorPayload(
            code=code, message=raw, violated_rule=rule, hint=registry.get(code, "")
        )
    return ErrorPayload(
        code=UNCLASSIFIED, message=raw, violated_rule="",
        hint=registry.get(UNCLASSIFIED, ""),
    )


class EnvHandle:
    """A working copy of the origin snapshot with triggers installed.

    Callers must serialize execute_tool on one handle; open several handles
    for parallel rollouts. The origin snapshot bytes are never mutated.
    """

    def __init__(self, bundle: EnvironmentBundle, origin: Snapshot):
        self.bundle = bundle
        self.origin = origin
        self.turn_counter = 0
        self.closed = False
        self._tools = bundle.tools_by_name()
        self._columns_cache: dict[str, list] = {}
        fd, self._path = tempfile.mkstemp(suffix=".db", prefix="policygym-env-")
        os.close(fd)
        origin.write_to(self._path)
        self._conn = self._connect()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self._path, isolation_level=None)
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    # -- lifecycle ----------------------------------------------------------

    def close(self) -> None:
        if not self.closed:
            self._conn.close()
            for suffix in ("", "-journal", "-wal", "-shm"):
                try:
                    os.unlink(self._path + suffix)
                except FileNotFoundError:
                    pass
            self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def reset(self) -> None:
        """Restore the working state to the origin snapshot."""
        self._conn.close()
        self.origin.write_to(self._path)
        self._conn = self._connect()
        self.turn_counter = 0

    # -- introspection ------------------------------------------------------

    @property
    def connection(self) -> sqlite3.Connection:
        return self._conn

    def columns(self, table: str):
        if table not in self._columns_cache:
            self._columns_cache[table] = table_columns(self._conn, table)
        return self._columns_cache[table]

    def digest(self) -> str:
        return state_digest(self._conn)

    def snapshot(self) -> Snapshot:
        """Immutable copy of the current state; later writes do not affect it."""
        return Snapshot.from_connection(self._conn)

    # -- privileged writes ----------------------------------------------------

    def system_write(self, sql: str, params=()) -> int:
        """Engine-level write with triggers active but no permission gate.

        Used by seeding and probing; agent traffic must go through
        execute_tool. Raises sqlite3.Error on rejection; fully rolled back.
        """
        self._conn.execute("BEGIN IMMEDIATE")
        try:
            cur = self._conn.execute(sql, params)
            self._conn.execute("COMMIT")
            return cur.rowcount
        except sqlite3.Error:
            self._conn.execute("ROLLBACK")
            raise


def open_environment(pkg: TaskPackage) -> EnvHandle:
    """Instantiate a live environment seeded from the package origin."""
    return EnvHandle(pkg.env, pkg.origin_snapshot)


def open_environment_at(bundle: EnvironmentBundle, snapshot: Snapshot) -> EnvHandle:
    """Live environment starting from an arbitrary snapshot (synthesis paths)."""
    return EnvHandle(bundle, snapshot)


def snapshot(env: EnvHandle) -> Snapshot:
    return env.snapshot()


def reset(env: EnvHandle) -> None:
    env.reset()


# --- argument validation ---------------------------------------------------------

_JSON_TYPE_CHECKS = {
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
}


def _check_scalar(value, json_type: str, label: str) -> None:
    if value is None:
        return  # NULLs pass through; NOT NULL enforcement belongs to the engine
    check = _JSON_TYPE_CHECKS.get(json_type)
    if check and not check(value):
        raise MalformedArguments(f"{label}: expected {json_type}, got {type(value).__name__}")


def _validate_insert_args(spec: ToolSpec, args: dict) -> None:
    props = spec.parameter_schema["properties"]
    required = spec.parameter_schema["required"]
    for key in args:
        if key not in props:
            raise MalformedArguments(f"unknown column {key!r} for {spec.name}")
    for key in required:
        if key not in args:
            raise MalformedArguments(f"missing required column {key!r} for {spec.name}")
    for key, value in args.items():
        _check_scalar(value, props[key].get("type", ""), f"{spec.name}.{key}")


def _normalize_filters(raw, columns: set[str], spec_name: str):
    """Accept [{column, op, value}] or a {column: value} equality shorthand."""
    if raw is None:
        return []
    if isinstance(raw, dict):
        raw = [{"column": c, "op": "=", "value": v} for c, v in raw.items()]
    if not isinstance(raw, list):
        raise MalformedArguments(f"{spec_name}: filters must be a list or object")
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MalformedArguments(f"{spec_name}: filters[{i}] must be an object")
        col = item.get("column")
        op = item.get("op", "=")
        if col not in columns:
            raise MalformedArguments(f"{spec_name}: unknown filter column {col!r}")
        if op not in QUERY_OPERATORS:
            raise MalformedArguments(f"{spec_name}: unsupported operator {op!r}")
        if "value" not in item:
            raise MalformedArguments(f"{spec_name}: filters[{i}] missing value")
        value = item["value"]
        if value is None and op not in ("=", "!="):
            raise MalformedArguments(f"{spec_name}: NULL only supports = and !=")
        out.append((col, op, value))
    return out


def _filters_to_sql(filters) -> tuple[str, list]:
    clauses, params = [], []
    for col, op, value in filters:
        if value is None:
            clauses.append(
                f"{quote_ident(col)} IS NULL" if op == "=" else f"{quote_ident(col)} IS NOT NULL"
            )
        else:
            clauses.append(f"{quote_ident(col)} {op} ?")
            params.append(value)
    where = (" WHERE " + " AND ".join(clauses)) if clauses else ""
    return where, params


# --- execution ----------------------------------------------------------------------

def _lookup_tool(env: EnvHandle, name: str) -> ToolSpec:
    spec = env._tools.get(name)
    if spec is not None:
        return spec
    # distinguish "write to a read-only table" from a plain unknown name
    m = re.match(r"(insert|update)_(\w+)$", name)
    if m and m.group(2) in env.bundle.permissions:
        if env.bundle.permissions[m.group(2)] == READ_ONLY:
            raise ReadOnlyTable(f"table {m.group(2)} is read-only; {name} is not available")
    raise UnknownTool(name)


def execute_tool(env: EnvHandle, call: ToolCall) -> ToolResult:
    """Execute one tool call in its own transaction.

    Engine aborts (trigger RAISEs, constraint failures) become error results
    with the state fully rolled back; UnknownTool / MalformedArguments /
    ReadOnlyTable are raised before any engine dispatch.
    """
    if env.closed:
        raise RuntimeError("environment is closed")
    spec = _lookup_tool(env, call.tool_name)
    if not isinstance(call.arguments, dict):
        raise MalformedArguments(f"{call.tool_name}: arguments must be an object")

    if spec.kind == "query":
        result = _run_query(env, spec, call.arguments)
    elif spec.kind == "insert":
        _validate_insert_args(spec, call.arguments)
        result = _run_write(env, spec, call.arguments, _insert_sql)
    elif spec.kind == "update":
        result = _run_write(env, spec, call.arguments, _update_sql)
    else:  # escalation
        summary = call.arguments.get("summary")
        if set(call.arguments) - {"summary"}:
            raise MalformedArguments(f"{spec.name}: only 'summary' is accepted")
        if not isinstance(summary, str) or not summary:
            raise MalformedArguments(f"{spec.name}: summary must be a non-empty string")
        result = _run_write(
            env, spec, {"summary": summary},
            lambda e, s, a: ("INSERT INTO escalations (summary) VALUES (?)", [a["summary"]]),
        )
    env.turn_counter += 1
    return result


def safe_execute_tool(env: EnvHandle, call: ToolCall) -> ToolResult:
    """execute_tool with caller-contract violations folded into error results.

    Rollout loops use this so an agent's malformed call becomes feedback
    instead of a crash; the state is untouched in every error case.
    """
    try:
        return execute_tool(env, call)
    except UnknownTool as exc:
        payload = ErrorPayload(code="UNKNOWN_TOOL", message=f"unknown tool: {exc}",
                               hint="use a tool from the provided catalog")
    except ReadOnlyTable as exc:
        payload = ErrorPayload(code="READ_ONLY_TABLE", message=str(exc),
                               hint="this table only supports query tools")
    except MalformedArguments as exc:
        payload = ErrorPayload(code="MALFORMED_ARGUMENTS", message=str(exc),
                               hint="check the tool parameter schema")
    env.turn_counter += 1
    return ToolResult(status="error", error=payload, state_digest=env.digest())


def _run_query(env: EnvHandle, spec: ToolSpec, args: dict) -> ToolResult:
    columns = [c.name for c in env.columns(spec.table)]
    extra = set(args) - {"filters", "order_by", "limit"}
    if extra:
        raise MalformedArguments(f"{spec.name}: unknown parameter {sorted(extra)[0]!r}")
    filters = _normalize_filters(args.get("filters"), set(columns), spec.name)
    where, params = _filters_to_sql(filters)
    sql = "SELECT {} FROM {}{}".format(
        ", ".join(quote_ident(c) for c in columns), quote_ident(spec.table), where
    )
    order = args.get("order_by")
    if order is not None:
        if not isinstance(order, dict) or order.get("column") not in columns:
            raise MalformedArguments(f"{spec.name}: bad order_by")
        direction = order.get("direction", "asc")
        if direction not in ("asc", "desc"):
            raise MalformedArguments(f"{spec.name}: bad order_by direction")
        sql += f" ORDER BY {quote_ident(order['column'])} {direction.upper()}"
    limit = args.get("limit")
    if limit is not None:
        if not isinstance(limit, int) or isinstance(limit, bool) or limit < 0:
            raise MalformedArguments(f"{spec.name}: limit must be a non-negative integer")
        sql += " LIMIT ?"
        params.append(limit)
    rows = tuple(dict(zip(columns, row)) for row in env.connection.execute(sql, params))
    return ToolResult(status="success", rows=rows, affected=0, state_digest=env.digest())


def _insert_sql(env: EnvHandle, spec: ToolSpec, args: dict) -> tuple[str, list]:
    cols = list(args)
    sql = "INSERT INTO {} ({}) VALUES ({})".format(
        quote_ident(spec.table),
        ", ".join(quote_ident(c) for c in cols),
        ", ".join("?" for _ in cols),
    )
    return sql, [args[c] for c in cols]


def _update_sql(env: EnvHandle, spec: ToolSpec, args: dict) -> tuple[str, list]:
    columns = {c.name for c in env.columns(spec.table)}
    extra = set(args) - {"filters", "set"}
    if extra:
        raise MalformedArguments(f"{spec.name}: unknown parameter {sorted(extra)[0]!r}")
    setter = args.get("set")
    if not isinstance(setter, dict) or not setter:
        raise MalformedArguments(f"{spec.name}: 'set' must be a non-empty object")
    for col in setter:
        if col not in columns:
            raise MalformedArguments(f"{spec.name}: unknown set column {col!r}")
    raw_filters = args.get("filters")
    if not isinstance(raw_filters, dict):
        raise MalformedArguments(f"{spec.name}: 'filters' must be an object (equality only)")
    filters = _normalize_filters(raw_filters, columns, spec.name)
    where, where_params = _filters_to_sql(filters)
    sql = "UPDATE {} SET {}{}".format(
        quote_ident(spec.table),
        ", ".join(f"{quote_ident(c)} = ?" for c in setter),
        where,
    )
    return sql, list(setter.values()) + where_params


def _run_write(env: EnvHandle, spec: ToolSpec, args: dict, build) -> ToolResult:
    conn = env.connection
    sql, params = build(env, spec, args)
    conn.execute("BEGIN IMMEDIATE")
    try:
        cur = conn.execute(sql, params)
        affected = max(cur.rowcount, 0)
        conn.execute("COMMIT")
    except sqlite3.Error as exc:
        conn.execute("ROLLBACK")
        payload = parse_engine_error(str(exc), env.bundle.error_registry)
        return ToolResult(status="error", error=payload, state_digest=env.digest())
    return ToolResult(status="success", affected=affected, state_digest=env.digest())
