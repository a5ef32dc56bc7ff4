"""Deterministic skeleton of the three-stage data synthesis pipeline.

All text generation sits behind a GenerationPort; everything that can be
checked mechanically (DDL compilation, seed admission through triggers,
boundary probing, episode execution, redaction) is implemented concretely.
A bundle is accepted only when its physical checks pass; semantic checking
is delegated to a port and marked skipped when none is configured.
"""

from __future__ import annotations

import json
import re
import sqlite3
import warnings
from dataclasses import dataclass

from .errors import (
    CompilationExhausted,
    CompileFailure,
    ExplorationDiverged,
    RedactionIncomplete,
    SeedRejected,
    SpoilerLeak,
    SynthesisError,
)
from .executor import EnvHandle, ToolCall, ToolResult, open_environment_at, safe_execute_tool
from .packages import (
    ESCALATIONS_TABLE,
    READ_WRITE,
    EnvironmentBundle,
    RolloutLimits,
    TaskPackage,
    compile_environment,
    derive_tools_from_connection,
    extract_trigger_annotations,
    find_spoiler,
    harvest_error_codes,
)
from .snapshots import (
    Snapshot,
    foreign_keys,
    is_autoincrement,
    list_tables,
    quote_ident,
    table_columns,
    table_sql,
    temp_db_path,
)
from .verify import DiffConfig, diff

_PERMISSION_TAG_RE = re.compile(
    r"--\s*(L0_REFERENCE|L1_ENTITY|L2_TRANSACTION)\s+Table:\s*(\w+)", re.IGNORECASE
)
_QUOTA_CMP_RE = re.compile(r">=\s*\d+")
_CHECK_ENUM_RE = re.compile(r"CHECK\s*\(\s*[\"'`]?(\w+)[\"'`]?\s+IN\s*\(([^)]*)\)\s*\)", re.IGNORECASE)
_TRIGGER_EVENT_RE = re.compile(
    r"CREATE\s+TRIGGER\s+(?:IF\s+NOT\s+EXISTS\s+)?[\"'`]?\w+[\"'`]?\s+"
    r"(BEFORE|AFTER)\s+(INSERT|UPDATE|DELETE)(?:\s+OF\s+[\w\s,\"']+?)?\s+ON\s+[\"'`]?(\w+)",
    re.IGNORECASE,
)

ARCHITECT_STAGES = ("analyze", "policy", "tables", "triggers")


# --- ports ----------------------------------------------------------------------

class GenerationPort:
    """Text generator behind the pipeline. Implementations must be
    deterministic for a given seed or declare themselves nondeterministic."""

    deterministic = False

    def generate(self, stage: str, context: dict, seed: int) -> str:
        raise NotImplementedError


class StubGenerationPort(GenerationPort):
    """Replays canned outputs per stage; fully deterministic."""

    deterministic = True

    def __init__(self, outputs: dict[str, list[str]]):
        self._queues = {stage: list(texts) for stage, texts in outputs.items()}

    def generate(self, stage: str, context: dict, seed: int) -> str:
        queue = self._queues.get(stage)
        if not queue:
            raise SynthesisError(f"stub port has no canned output left for stage {stage!r}")
        return queue.pop(0)


# --- report / episode types ---------------------------------------------------------

@dataclass(frozen=True)
class VerificationReport:
    stage: str  # policy | tables | triggers | seed_state | episode
    physical: str  # pass | fail
    physical_message: str = ""
    semantic: str = "skipped"  # pass | fail | skipped
    semantic_detail: str = ""
    attempts: int = 1
    warnings: tuple[str, ...] = ()

    @property
    def accepted(self) -> bool:
        return self.physical == "pass"

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "physical": self.physical,
            "physical_message": self.physical_message,
            "semantic": self.semantic,
            "semantic_detail": self.semantic_detail,
            "attempts": self.attempts,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class BoundaryProbeResult:
    probes: tuple[dict, ...]  # {"tool_call": ToolCall json, "outcome": "accepted"|"rejected", "code": str}
    adjacency_score: float

    def to_json(self) -> dict:
        return {"probes": list(self.probes), "adjacency_score": self.adjacency_score}


@dataclass(frozen=True)
class EpisodeMessage:
    speaker: str  # client | consultant
    text: str


@dataclass(frozen=True)
class RawEpisode:
    transcript: tuple[EpisodeMessage, ...]
    actions: tuple[tuple[ToolCall, ToolResult], ...]
    s_target: Snapshot
    goal: str


@dataclass(frozen=True)
class ArchitectResult:
    bundle: EnvironmentBundle
    policy_doc: str
    reports: tuple[VerificationReport, ...]
    blueprint: str = ""


# --- architect ------------------------------------------------------------------------

def parse_permission_tags(schema_sql: str) -> dict[str, str]:
    """Permissions from the schema's table tag comments.

    L0_REFERENCE and L1_ENTITY tables are read-only, L2_TRANSACTION tables
    are read-write. Untagged tables default to read-write.
    """
    out = {}
    for tag, table in _PERMISSION_TAG_RE.findall(schema_sql):
        mode = "read_only" if tag.upper() in ("L0_REFERENCE", "L1_ENTITY") else READ_WRITE
        out[table] = mode
    return out


def _semantic_check(port: GenerationPort | None, stage: str, artifact: str, seed: int):
    if port is None:
        return "skipped", ""
    verdict = port.generate("semantic_check", {"stage": stage, "artifact": artifact}, seed)
    verdict = verdict.strip()
    if verdict.upper().startswith("PASS"):
        return "pass", ""
    return "fail", verdict


def architect_compile(
    seed_domain: str,
    port: GenerationPort,
    max_attempts: int,
    semantic_checker: GenerationPort | None = None,
    seed: int = 0,
) -> ArchitectResult:
    """Run the four compilation stages with a check-fix-verify loop.

    The DDL stages are compiled on a scratch engine after every attempt;
    failures are fed back to the port verbatim as the corrective context.
    Only bundles whose physical check passes are returned.
    """
    if not seed_domain.strip():
        raise SynthesisError("seed_domain must be non-empty")
    if max_attempts < 1:
        raise CompilationExhausted("max_attempts must allow at least one attempt")

    reports: list[VerificationReport] = []
    blueprint = port.generate("analyze", {"seed_domain": seed_domain}, seed)

    policy_doc = port.generate("policy", {"seed_domain": seed_domain, "blueprint": blueprint}, seed)
    sem, detail = _semantic_check(semantic_checker, "policy", policy_doc, seed)
    reports.append(VerificationReport(stage="policy", physical="pass",
                                      semantic=sem, semantic_detail=detail))

    def compiled_stage(stage: str, check) -> str:
        failure = ""
        last_report = None
        for attempt in range(1, max_attempts + 1):
            context = {"seed_domain": seed_domain, "blueprint": blueprint,
                       "policy": policy_doc, "failure": failure}
            text = port.generate(stage, context, seed)
            try:
                check(text)
            except CompileFailure as exc:
                failure = str(exc)
                last_report = VerificationReport(stage=stage, physical="fail",
                                                 physical_message=failure, attempts=attempt)
                reports.append(last_report)
                continue
            sem_v, det = _semantic_check(semantic_checker, stage, text, seed)
            report = VerificationReport(stage=stage, physical="pass",
                                        semantic=sem_v, semantic_detail=det, attempts=attempt)
            reports.append(report)
            return text
        raise CompilationExhausted(
            f"stage {stage!r} failed physical check after {max_attempts} attempts: {failure}",
            report=last_report,
        )

    schema_sql = compiled_stage("tables", lambda text: compile_environment(text, "").close())

    def check_triggers(text: str) -> None:
        compile_environment(schema_sql, text).close()

    triggers_sql = compiled_stage("triggers", check_triggers)

    permissions = parse_permission_tags(schema_sql)
    conn = compile_environment(schema_sql, triggers_sql)
    try:
        for table in list_tables(conn):
            if table != ESCALATIONS_TABLE and table not in permissions:
                permissions[table] = READ_WRITE
        annotations = extract_trigger_annotations(conn)
        catalog = derive_tools_from_connection(conn, permissions, annotations)
    finally:
        conn.close()

    bundle = EnvironmentBundle(
        schema=schema_sql,
        triggers=triggers_sql,
        permissions=permissions,
        tool_catalog=catalog,
        error_registry={code: "" for code in harvest_error_codes(triggers_sql)},
    )
    return ArchitectResult(bundle=bundle, policy_doc=policy_doc,
                           reports=tuple(reports), blueprint=blueprint)


# --- physical verification ----------------------------------------------------------

def _check_enum_values(create_sql: str) -> dict[str, list[str]]:
    """Column -> allowed literals parsed from simple CHECK(col IN (...)) clauses."""
    out: dict[str, list[str]] = {}
    for col, body in _CHECK_ENUM_RE.findall(create_sql):
        values = [v.strip().strip("'\"") for v in body.split(",") if v.strip()]
        if values:
            out[col] = values
    return out


def derive_probe_row(conn: sqlite3.Connection, table: str) -> dict | None:
    """Best-effort trivially-valid insert arguments for ``table``.

    Returns None when a required foreign key has no candidate parent value;
    triggers may still reject the row, which probing treats as signal, not
    failure.
    """
    enums = _check_enum_values(table_sql(conn, table))
    fks = {fk.column: fk for fk in foreign_keys(conn, table)}
    row: dict = {}
    for col in table_columns(conn, table):
        if col.primary_key and "INT" in (col.decl_type or "").upper():
            continue
        if col.default is not None:
            continue
        if not col.notnull and not col.primary_key:
            continue
        fk = fks.get(col.name)
        if fk is not None:
            # first-seeded parent row: reference data is inserted in its
            # natural priority order, so rowid order beats lexicographic
            try:
                parent = conn.execute(
                    "SELECT {c} FROM {t} ORDER BY rowid LIMIT 1".format(
                        c=quote_ident(fk.ref_column), t=quote_ident(fk.ref_table)
                    )
                ).fetchone()
            except sqlite3.OperationalError:
                parent = conn.execute(
                    "SELECT {c} FROM {t} ORDER BY {c} LIMIT 1".format(
                        c=quote_ident(fk.ref_column), t=quote_ident(fk.ref_table)
                    )
                ).fetchone()
            if parent is None:
                return None
            row[col.name] = parent[0]
            continue
        if col.name in enums:
            row[col.name] = enums[col.name][0]
            continue
        decl = (col.decl_type or "").upper()
        if "INT" in decl:
            row[col.name] = 1
        elif any(t in decl for t in ("REAL", "FLOA", "DOUB")):
            row[col.name] = 1.0
        else:
            row[col.name] = "probe"
    return row


def _probe_write(conn: sqlite3.Connection, sql: str, params) -> tuple[str, str]:
    """Run a write inside a rolled-back savepoint; classify the outcome."""
    conn.execute("SAVEPOINT probe")
    try:
        conn.execute(sql, params)
        return "accepted", ""
    except sqlite3.OperationalError as exc:
        return "broken", str(exc)  # missing table/column inside a trigger body
    except sqlite3.Error as exc:
        return "rejected", str(exc)
    finally:
        conn.execute("ROLLBACK TO probe")
        conn.execute("RELEASE probe")


def verify_environment(bundle: EnvironmentBundle) -> VerificationReport:
    """Physical-executability check of a compiled bundle.

    Compiles schema and triggers on a scratch engine, confirms every declared
    relation instantiated, then attempts one trivially-valid and one
    trivially-invalid write per read-write table where derivable. Engine
    rejections are expected; only broken references or failed compilation
    flunk the check.
    """
    warns: list[str] = []
    try:
        conn = compile_environment(bundle.schema, bundle.triggers)
    except CompileFailure as exc:
        return VerificationReport(stage="triggers", physical="fail", physical_message=str(exc))
    try:
        tables = list_tables(conn)
        declared = [t for t in tables if t != ESCALATIONS_TABLE]
        if not declared:
            warns.append("schema declares no tables; vacuous pass")
        for table in bundle.tables(READ_WRITE):
            if table not in tables:
                return VerificationReport(
                    stage="triggers", physical="fail",
                    physical_message=f"declared table missing: {table}",
                )
            row = derive_probe_row(conn, table)
            if row is None:
                warns.append(f"{table}: valid probe not derivable (empty parent tables)")
            else:
                cols = list(row)
                sql = "INSERT INTO {} ({}) VALUES ({})".format(
                    quote_ident(table),
                    ", ".join(quote_ident(c) for c in cols),
                    ", ".join("?" for _ in cols),
                )
                outcome, message = _probe_write(conn, sql, [row[c] for c in cols])
                if outcome == "broken":
                    return VerificationReport(stage="triggers", physical="fail",
                                              physical_message=f"{table}: {message}")
                if outcome == "rejected":
                    warns.append(f"{table}: valid probe rejected: {message}")
            # trivially-invalid probe: violate the first NOT NULL column
            target = next((c for c in table_columns(conn, table)
                           if c.notnull and c.default is None and not c.primary_key), None)
            if target is not None:
                sql = f"INSERT INTO {quote_ident(table)} ({quote_ident(target.name)}) VALUES (NULL)"
                outcome, message = _probe_write(conn, sql, [])
                if outcome == "broken":
                    return VerificationReport(stage="triggers", physical="fail",
                                              physical_message=f"{table}: {message}")
                if outcome == "accepted":
                    warns.append(f"{table}: invalid probe unexpectedly accepted")
    finally:
        conn.close()
    return VerificationReport(stage="triggers", physical="pass", warnings=tuple(warns))


# --- seeding ------------------------------------------------------------------------

def empty_snapshot_for(bundle: EnvironmentBundle) -> Snapshot:
    with temp_db_path() as path:
        conn = sqlite3.connect(path)
        try:
            compile_environment(bundle.schema, bundle.triggers, conn)
            conn.commit()
        finally:
            conn.close()
        return Snapshot.from_file(path)


def apply_seed_proposals(env: EnvHandle, proposals) -> tuple[dict[str, int], list[dict]]:
    """Insert proposed rows through the live engine, one transaction each.

    Returns per-table committed counts and the rejected proposals with their
    engine messages. Trigger side effects (auto flags, derived counters) land
    in the seeded state exactly as they would during an episode.
    """
    committed: dict[str, int] = {}
    rejected: list[dict] = []
    for proposal in proposals:
        table = proposal["table"]
        strategy = proposal.get("strategy", "")
        for row in proposal.get("rows", []):
            cols = list(row)
            sql = "INSERT INTO {} ({}) VALUES ({})".format(
                quote_ident(table),
                ", ".join(quote_ident(c) for c in cols),
                ", ".join("?" for _ in cols),
            )
            try:
                env.system_write(sql, [row[c] for c in cols])
            except sqlite3.Error as exc:
                rejected.append({"table": table, "strategy": strategy,
                                 "row": row, "error": str(exc)})
            else:
                committed[table] = committed.get(table, 0) + 1
    return committed, rejected


def seed_initial_state(
    bundle: EnvironmentBundle,
    strategy_cfg: dict,
    port: GenerationPort,
    seed: int = 0,
) -> Snapshot:
    """Build the origin snapshot from port-proposed rows filtered by triggers."""
    context = {
        "strategies": strategy_cfg.get("strategies",
                                       ["trade-offs", "distractors", "substitutes", "noise"]),
        "archetypes": strategy_cfg.get("archetypes",
                                       ["mismatch", "entangled", "rookie", "edge"]),
        "tables": {t: [c.name for c in _bundle_columns(bundle, t)]
                   for t in sorted(bundle.permissions)},
    }
    text = port.generate("seed_state", context, seed)
    try:
        proposals = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SynthesisError(f"seed_state port returned invalid JSON: {exc}") from exc
    if not isinstance(proposals, list):
        raise SynthesisError("seed_state proposals must be a JSON list")

    with open_environment_at(bundle, empty_snapshot_for(bundle)) as env:
        committed, rejected = apply_seed_proposals(env, proposals)
        proposed_tables = {p["table"] for p in proposals if p.get("rows")}
        for table in strategy_cfg.get("required_tables", sorted(proposed_tables)):
            if committed.get(table, 0) == 0:
                detail = next((r["error"] for r in rejected if r["table"] == table), "no proposals")
                raise SeedRejected(f"table {table}: {detail}")
        return env.snapshot()


def _bundle_columns(bundle: EnvironmentBundle, table: str):
    conn = compile_environment(bundle.schema, bundle.triggers)
    try:
        return table_columns(conn, table)
    finally:
        conn.close()


# --- boundary probing ------------------------------------------------------------------

def quota_bearing_tables(conn: sqlite3.Connection) -> list[str]:
    """Tables whose BEFORE INSERT triggers compare a count against a threshold."""
    out = []
    for (sql,) in conn.execute(
        "SELECT sql FROM sqlite_master WHERE type = 'trigger' ORDER BY name"
    ):
        m = _TRIGGER_EVENT_RE.search(sql or "")
        if not m:
            continue
        if m.group(1).upper() == "BEFORE" and m.group(2).upper() == "INSERT":
            if _QUOTA_CMP_RE.search(sql):
                if m.group(3) not in out:
                    out.append(m.group(3))
    return out


def probe_boundary_adjacency(
    bundle: EnvironmentBundle,
    s: Snapshot,
    probe_budget: int,
    probe_specs: list[dict] | None = None,
) -> BoundaryProbeResult:
    """Measure how close a state sits to its rule boundaries.

    Candidate single-step writes are derived mechanically: one insert per
    quota-bearing table plus status transitions on each transactional table;
    non-numeric boundaries need explicit probe specs. Every probe runs on a
    scratch copy and nothing persists.
    """
    candidates: list[ToolCall] = []
    for spec in probe_specs or []:
        candidates.append(ToolCall.from_json(spec))

    with s.connect() as conn:
        for table in quota_bearing_tables(conn):
            if bundle.permissions.get(table) != READ_WRITE:
                continue
            row = derive_probe_row(conn, table)
            if row is not None:
                candidates.append(ToolCall(tool_name=f"insert_{table}", arguments=row))
        for table in bundle.tables(READ_WRITE):
            cols = {c.name: c for c in table_columns(conn, table)}
            if "status" not in cols:
                continue
            pk = next((c.name for c in table_columns(conn, table) if c.primary_key), None)
            if pk is None:
                continue
            enums = _check_enum_values(table_sql(conn, table)).get("status", [])
            rows = conn.execute(
                "SELECT {pk}, status FROM {t} ORDER BY {pk} LIMIT 3".format(
                    pk=quote_ident(pk), t=quote_ident(table)
                )
            ).fetchall()
            for pk_value, current in rows:
                for value in enums:
                    if value != current:
                        candidates.append(ToolCall(
                            tool_name=f"update_{table}",
                            arguments={"filters": {pk: pk_value}, "set": {"status": value}},
                        ))

    candidates = candidates[: max(probe_budget, 0)]
    records = []
    rejected = 0
    if candidates:
        with open_environment_at(bundle, s) as env:
            for call in candidates:
                result = safe_execute_tool(env, call)
                if result.status == "error":
                    rejected += 1
                    records.append({"tool_call": call.to_json(), "outcome": "rejected",
                                    "code": result.error.code})
                else:
                    records.append({"tool_call": call.to_json(), "outcome": "accepted",
                                    "code": ""})
                env.reset()
    score = rejected / len(records) if records else 0.0
    return BoundaryProbeResult(probes=tuple(records), adjacency_score=score)


# --- exploration --------------------------------------------------------------------------

def _parse_port_doc(raw: str, stage: str) -> dict:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SynthesisError(f"{stage} port returned invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SynthesisError(f"{stage} port must return a JSON object")
    return doc


def explore_episode(
    bundle: EnvironmentBundle,
    s_origin: Snapshot,
    client_port: GenerationPort,
    consultant_port: GenerationPort,
    limits: RolloutLimits,
    seed: int = 0,
    repetition_threshold: int = 3,
) -> RawEpisode:
    """Client/consultant exploration with every action executed for real.

    Consultant writes feed their structured error payloads back into the
    next generation context; the episode diverges after
    ``repetition_threshold`` consecutive identical rejected writes or when
    the turn budget runs out before the client confirms the goal.
    """
    transcript: list[EpisodeMessage] = []
    actions: list[tuple[ToolCall, ToolResult]] = []
    goal = ""
    last_error = None
    repeat_key = None
    repeat_count = 0
    confirmed = False

    with open_environment_at(bundle, s_origin) as env:
        for _ in range(limits.max_turns):
            context = {
                "transcript": [{"speaker": m.speaker, "text": m.text} for m in transcript],
                "goal": goal,
                "last_error": last_error,
            }
            client_doc = _parse_port_doc(client_port.generate("client", context, seed), "client")
            message = str(client_doc.get("message", ""))
            if client_doc.get("goal"):
                goal = str(client_doc["goal"])
            transcript.append(EpisodeMessage(speaker="client", text=message))
            if client_doc.get("stop"):
                confirmed = True
                break

            context["transcript"] = [{"speaker": m.speaker, "text": m.text} for m in transcript]
            consultant_doc = _parse_port_doc(
                consultant_port.generate("consultant", context, seed), "consultant"
            )
            for call_doc in consultant_doc.get("tool_calls", []):
                call = ToolCall.from_json(call_doc)
                result = safe_execute_tool(env, call)
                actions.append((call, result))
                if result.status == "error":
                    last_error = result.error.to_json()
                    key = (call.tool_name, json.dumps(call.arguments, sort_keys=True, default=str))
                    repeat_count = repeat_count + 1 if key == repeat_key else 1
                    repeat_key = key
                    if repeat_count >= repetition_threshold:
                        raise ExplorationDiverged(
                            f"{repeat_count} consecutive identical rejected writes: {call.tool_name}"
                        )
                else:
                    last_error = None
                    repeat_key = None
                    repeat_count = 0
            transcript.append(
                EpisodeMessage(speaker="consultant", text=str(consultant_doc.get("message", "")))
            )
        if not confirmed:
            raise ExplorationDiverged("turn limit reached without goal confirmation")
        s_target = env.snapshot()

    return RawEpisode(transcript=tuple(transcript), actions=tuple(actions),
                      s_target=s_target, goal=goal)


# --- user-view projection --------------------------------------------------------------

def build_redaction_list(
    bundle: EnvironmentBundle, ep: RawEpisode | None = None, extra=()
) -> tuple[str, ...]:
    """Deterministic token list for the projection: tool names, table names,
    multi-word (snake_case) column names, string-valued technical key values
    observed in episode results, plus explicit extras."""
    tokens: dict[str, None] = {}
    for tool in bundle.tool_catalog:
        tokens.setdefault(tool.name, None)
    conn = compile_environment(bundle.schema, bundle.triggers)
    try:
        key_columns: dict[str, str] = {}
        for table in list_tables(conn):
            tokens.setdefault(table, None)
            for col in table_columns(conn, table):
                if "_" in col.name:
                    tokens.setdefault(col.name, None)
            if is_autoincrement(conn, table):
                pk = next((c.name for c in table_columns(conn, table) if c.primary_key), None)
                if pk:
                    key_columns[table] = pk
    finally:
        conn.close()
    if ep is not None:
        tools = bundle.tools_by_name()
        for call, result in ep.actions:
            spec = tools.get(call.tool_name)
            key = key_columns.get(spec.table) if spec is not None else None
            if key is None:
                continue
            for row in result.rows:
                value = row.get(key)
                if isinstance(value, str):
                    tokens.setdefault(value, None)
    for token in extra:
        tokens.setdefault(token, None)
    return tuple(tokens)


def _redact(text: str, tokens: tuple[str, ...]) -> str:
    for token in sorted(tokens, key=len, reverse=True):
        if not token:
            continue
        text = re.sub(rf"(?<!\w){re.escape(token)}(?!\w)", "[redacted]", text,
                      flags=re.IGNORECASE)
    return text


def project_user_view(
    ep: RawEpisode,
    redaction_list,
    port: GenerationPort | None = None,
    seed: int = 0,
) -> str:
    """Spoiler-free task description: the goal plus client-visible utterances,
    with procedural cues stripped. An optional port pass rewrites for fluency;
    the redaction check runs again on its output."""
    tokens = tuple(redaction_list)
    lines = [f"GOAL: {_redact(ep.goal, tokens)}", "", "USER CONTEXT:"]
    for message in ep.transcript:
        if message.speaker != "client":
            continue
        lines.append(f"- {_redact(message.text, tokens)}")
    text = "\n".join(lines) + "\n"

    if port is not None:
        text = port.generate("task_rewrite", {"draft": text}, seed)

    leak = find_spoiler(text, [], tokens)
    if leak is not None:
        raise RedactionIncomplete(f"projection still contains {leak!r}")
    return text


# --- assembly -------------------------------------------------------------------------------

def default_diff_config(bundle: EnvironmentBundle) -> DiffConfig:
    """Exclude every auto-increment key column; technical keys carry no
    business meaning."""
    excluded: dict[str, frozenset[str]] = {}
    conn = compile_environment(bundle.schema, bundle.triggers)
    try:
        for table in list_tables(conn):
            if not is_autoincrement(conn, table):
                continue
            pk = next((c.name for c in table_columns(conn, table) if c.primary_key), None)
            if pk:
                excluded[table] = frozenset({pk})
    finally:
        conn.close()
    return DiffConfig(excluded_columns=excluded)


def assemble_package(
    bundle: EnvironmentBundle,
    policy_doc: str,
    s_origin: Snapshot,
    ep: RawEpisode,
    task_text: str,
    name: str = "synthesized",
    domain: str = "",
    diff_config: DiffConfig | None = None,
    limits: RolloutLimits | None = None,
    redaction_list=(),
) -> TaskPackage:
    """Final package assembly with the two-view separation kept structural:
    the task text never references target-state internals, and the target is
    exactly the episode's executed final snapshot."""
    if not policy_doc.strip():
        raise SynthesisError("policy_doc must be non-empty")
    cfg = diff_config or default_diff_config(bundle)
    leak = find_spoiler(task_text, [t.name for t in bundle.tool_catalog], redaction_list)
    if leak is not None:
        raise SpoilerLeak(f"task text mentions {leak!r}")
    delta0 = diff(s_origin, ep.s_target, cfg).total
    if delta0 == 0:
        warnings.warn(f"package {name!r} is trivial: origin already equals target")
    return TaskPackage(
        name=name,
        domain=domain,
        policy_doc=policy_doc,
        task_description=task_text,
        env=bundle,
        origin_snapshot=s_origin,
        target_snapshot=ep.s_target,
        diff_config=cfg,
        limits=limits or RolloutLimits(),
        redaction_list=tuple(redaction_list),
        delta0=delta0,
    )


# --- end-to-end orchestration -------------------------------------------------------------

def synthesize_package(
    seed_domain: str,
    port: GenerationPort,
    max_attempts: int = 3,
    strategy_cfg: dict | None = None,
    limits: RolloutLimits | None = None,
    name: str = "synthesized",
    domain: str = "",
    probe_budget: int = 32,
    seed: int = 0,
    semantic_checker: GenerationPort | None = None,
) -> tuple[TaskPackage, dict]:
    """Architect -> verify -> seed -> probe -> explore -> project -> assemble.

    Returns the package plus a stage log (reports, adjacency score and the
    executed episode actions for ground-truth replay checks).
    """
    strategy_cfg = strategy_cfg or {}
    result = architect_compile(seed_domain, port, max_attempts,
                               semantic_checker=semantic_checker, seed=seed)
    gate = verify_environment(result.bundle)
    if not gate.accepted:
        raise CompilationExhausted(
            f"environment failed physical verification: {gate.physical_message}", report=gate
        )
    s_origin = seed_initial_state(result.bundle, strategy_cfg, port, seed=seed)
    probe = probe_boundary_adjacency(
        result.bundle, s_origin, probe_budget, strategy_cfg.get("probe_specs")
    )
    limits = limits or RolloutLimits()
    episode = explore_episode(result.bundle, s_origin, port, port, limits, seed=seed,
                              repetition_threshold=strategy_cfg.get("repetition_threshold", 3))
    redaction = build_redaction_list(result.bundle, episode,
                                     strategy_cfg.get("redaction_extra", ()))
    task_text = project_user_view(episode, redaction)
    pkg = assemble_package(
        result.bundle, result.policy_doc, s_origin, episode, task_text,
        name=name, domain=domain, limits=limits, redaction_list=redaction,
    )
    log = {
        "stages": [r.to_json() for r in result.reports] + [gate.to_json()],
        "adjacency_score": probe.adjacency_score,
        "probes": probe.to_json()["probes"],
        "goal": episode.goal,
        "actions": [
            {"tool_call": call.to_json(), "result": res.to_json()}
            for call, res in episode.actions
        ],
        "delta0": pkg.delta0,
    }
    return pkg, log
