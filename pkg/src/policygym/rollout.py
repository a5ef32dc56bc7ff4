"""Closed-loop episode runner, trajectory recording and Pass@k metrics.

One episode drives a user port and an agent port over a live environment,
scoring every tool call against the target snapshot. Episodes never raise on
port misbehavior: a failed port yields a partial trajectory with termination
"deviation" and a failure note.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from math import comb

from .errors import InsufficientTrials, IoFailure
from .executor import ToolCall, ToolResult, open_environment, safe_execute_tool
from .packages import TaskPackage
from .verify import canonicalize, canonicalize_connection, dense_reward, diff_canonical, proximity

ROLE_USER = "user"
ROLE_AGENT_TEXT = "agent_text"
ROLE_AGENT_TOOL = "agent_tool"
ROLE_TOOL_RESULT = "tool_result"

TERMINATION_STOP = "stop_signal"
TERMINATION_DEVIATION = "deviation"
TERMINATION_BUDGET = "budget_exhausted"

# generous cap on agent actions inside one user turn so a text-less agent
# cannot hang the loop; counted separately from the user-turn budget
MAX_ACTIONS_PER_TURN = 50


@dataclass(frozen=True)
class Turn:
    """One role-tagged event. Proximity and reward are present exactly on
    agent_tool turns; mask_in_loss marks tokens trainers exclude (user and
    tool_result turns)."""

    index: int
    role: str
    content: object  # str | ToolCall | ToolResult
    state_digest: str
    proximity: float | None = None
    reward: float | None = None
    mask_in_loss: bool = True

    def to_json(self) -> dict:
        if isinstance(self.content, str):
            payload = self.content
        else:
            payload = self.content.to_json()
        return {
            "index": self.index,
            "role": self.role,
            "payload": _encode_json(payload),
            "state_digest": self.state_digest,
            "proximity": self.proximity,
            "reward": self.reward,
            "mask_in_loss": self.mask_in_loss,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Turn":
        payload = _decode_json(doc["payload"])
        role = doc["role"]
        if role == ROLE_AGENT_TOOL:
            content = ToolCall.from_json(payload)
        elif role == ROLE_TOOL_RESULT:
            content = ToolResult.from_json(payload)
        else:
            content = payload
        return cls(
            index=doc["index"],
            role=role,
            content=content,
            state_digest=doc["state_digest"],
            proximity=doc["proximity"],
            reward=doc["reward"],
            mask_in_loss=doc["mask_in_loss"],
        )


@dataclass(frozen=True)
class Trajectory:
    package_id: str
    turns: tuple[Turn, ...]
    termination: str
    final_diff: int
    r_final: int
    sum_dense: float
    note: str = ""

    def tool_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role == ROLE_AGENT_TOOL]

    def dense_rewards(self) -> list[float]:
        return [t.reward for t in self.tool_turns()]


def detect_stop(utterance: str, stop_token: str) -> bool:
    """True iff the trimmed utterance is exactly the stop token (standalone rule)."""
    return utterance.strip() == stop_token


def _dialogue_view(turns: list[Turn]) -> list[Turn]:
    return [t for t in turns if t.role in (ROLE_USER, ROLE_AGENT_TEXT)]


def run_episode(
    pkg: TaskPackage,
    agent,
    user,
    seed: int = 0,
    deviation_detector=None,
    max_actions_per_turn: int = MAX_ACTIONS_PER_TURN,
) -> Trajectory:
    """Run the interaction loop until stop signal, deviation or turn budget.

    The agent may emit any number of tool calls within one user turn; a text
    message addressed to the user ends the turn. Each tool call is scored
    with the state-proximity delta (or the violation penalty) against the
    package target.
    """
    cfg = pkg.diff_config
    delta0 = pkg.delta0
    target = canonicalize(pkg.target_snapshot, cfg)
    turns: list[Turn] = []
    termination = TERMINATION_BUDGET
    note = ""

    with open_environment(pkg) as env:
        digest = env.digest()
        current = diff_canonical(canonicalize_connection(env.connection, cfg), target).total
        p_prev = proximity(current, delta0, cfg.epsilon)
        index = 0
        stopped = False

        for _ in range(pkg.limits.max_turns):
            try:
                utterance = user.next_utterance(pkg.task_description, _dialogue_view(turns), seed)
            except Exception as exc:  # noqa: BLE001 - port contract: never crash the episode
                termination = TERMINATION_DEVIATION
                note = f"user port failure: {exc}"
                stopped = True
                break
            turns.append(Turn(index, ROLE_USER, utterance, digest))
            index += 1
            if detect_stop(utterance, pkg.limits.stop_token):
                termination = TERMINATION_STOP
                stopped = True
                break
            if deviation_detector is not None and deviation_detector(turns):
                termination = TERMINATION_DEVIATION
                note = "deviation verdict fired"
                stopped = True
                break

            ended_with_text = False
            for _ in range(max_actions_per_turn):
                try:
                    action = agent.next_action(pkg.policy_doc, pkg.env.tool_catalog, list(turns), seed)
                except Exception as exc:  # noqa: BLE001
                    termination = TERMINATION_DEVIATION
                    note = f"agent port failure: {exc}"
                    stopped = True
                    break
                if isinstance(action, str):
                    turns.append(Turn(index, ROLE_AGENT_TEXT, action, digest, mask_in_loss=False))
                    index += 1
                    ended_with_text = True
                    break
                if not isinstance(action, ToolCall):
                    termination = TERMINATION_DEVIATION
                    note = f"agent port returned unsupported action: {type(action).__name__}"
                    stopped = True
                    break
                result = safe_execute_tool(env, action)
                digest = result.state_digest
                current = diff_canonical(
                    canonicalize_connection(env.connection, cfg), target
                ).total
                p_t = proximity(current, delta0, cfg.epsilon)
                reward = dense_reward(p_t, p_prev, result.status == "error", cfg.lambda_err)
                turns.append(Turn(index, ROLE_AGENT_TOOL, action, digest,
                                  proximity=p_t, reward=reward, mask_in_loss=False))
                index += 1
                turns.append(Turn(index, ROLE_TOOL_RESULT, result, digest))
                index += 1
                p_prev = p_t
            if stopped:
                break
            if not ended_with_text:
                termination = TERMINATION_BUDGET
                note = note or "agent action budget exhausted within one turn"
                break

        final_diff = diff_canonical(canonicalize_connection(env.connection, cfg), target).total

    sum_dense = sum(t.reward for t in turns if t.role == ROLE_AGENT_TOOL)
    return Trajectory(
        package_id=pkg.name,
        turns=tuple(turns),
        termination=termination,
        final_diff=final_diff,
        r_final=1 if final_diff == 0 else 0,
        sum_dense=sum_dense,
        note=note,
    )


# --- metrics -----------------------------------------------------------------------

def pass_at_k(trials: int, successes: int, k: int) -> float:
    """Probability that at least one of k sampled rollouts succeeds."""
    _check_trials(trials, successes, k)
    return 1.0 - comb(trials - successes, k) / comb(trials, k)


def pass_hat_k(trials: int, successes: int, k: int) -> float:
    """Probability that all of k sampled rollouts succeed."""
    _check_trials(trials, successes, k)
    return comb(successes, k) / comb(trials, k)


def _check_trials(trials: int, successes: int, k: int) -> None:
    if trials < 1 or k < 1 or k > trials:
        raise InsufficientTrials(f"need 1 <= k <= trials, got k={k}, trials={trials}")
    if not 0 <= successes <= trials:
        raise InsufficientTrials(f"successes {successes} out of range for {trials} trials")


def compute_metrics(outcomes, k: int) -> dict:
    """Mean pass@k and pass^k over per-task (successes, trials) records."""
    if not outcomes:
        raise InsufficientTrials("no outcomes supplied")
    at, hat = [], []
    for record in outcomes:
        n, c = record["trials"], record["successes"]
        at.append(pass_at_k(n, c, k))
        hat.append(pass_hat_k(n, c, k))
    return {"pass_at_k": sum(at) / len(at), "pass_hat_k": sum(hat) / len(hat)}


# --- lossless JSONL export -----------------------------------------------------------

def _encode_json(value):
    if isinstance(value, bytes):
        return {"__bytes__": base64.b64encode(value).decode("ascii")}
    if isinstance(value, dict):
        return {k: _encode_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encode_json(v) for v in value]
    return value


def _decode_json(value):
    if isinstance(value, dict):
        if set(value) == {"__bytes__"}:
            return base64.b64decode(value["__bytes__"])
        return {k: _decode_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode_json(v) for v in value]
    return value


def export_trajectory(t: Trajectory, path) -> None:
    """Newline-delimited records: one header line, then one line per turn."""
    header = {
        "record": "trajectory",
        "package_id": t.package_id,
        "termination": t.termination,
        "final_diff": t.final_diff,
        "r_final": t.r_final,
        "sum_dense": t.sum_dense,
        "note": t.note,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for turn in t.turns:
        lines.append(json.dumps({"record": "turn", **turn.to_json()}, sort_keys=True))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def import_trajectory(path) -> Trajectory:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not lines:
        raise IoFailure(f"empty trajectory file: {path}")
    header = json.loads(lines[0])
    if header.get("record") != "trajectory":
        raise IoFailure(f"not a trajectory export: {path}")
    turns = tuple(Turn.from_json(json.loads(line)) for line in lines[1:])
    return Trajectory(
        package_id=header["package_id"],
        turns=turns,
        termination=header["termination"],
        final_diff=header["final_diff"],
        r_final=header["r_final"],
        sum_dense=header["sum_dense"],
        note=header.get("note", ""),
    )
