"""Agent and user simulator ports.

In-process ports implement two tiny call contracts; the subprocess transport
speaks newline-delimited JSON over standard streams so LLM-backed simulators
in any runtime can attach. This module also doubles as the scripted-port
executable used by the bundled fixture:

    python -m policygym.ports --role agent --script pkg/scripts/agent_script.json
"""

from __future__ import annotations

import argparse
import json
import os
import selectors
import shlex
import subprocess
import sys

from .errors import PortFailure
from .executor import ToolCall

DEFAULT_PORT_TIMEOUT = float(os.environ.get("POLICYGYM_PORT_TIMEOUT", "120"))


class AgentPort:
    """Produces the next agent action: either text for the user or a ToolCall."""

    deterministic = False

    def next_action(self, policy_doc: str, tool_catalog, history, seed: int):
        raise NotImplementedError


class UserPort:
    """Produces the next user utterance from the task text and the dialogue."""

    deterministic = False

    def next_utterance(self, task_description: str, history, seed: int) -> str:
        raise NotImplementedError


# --- scripted (fully deterministic) ----------------------------------------------

def _parse_agent_step(doc) -> "str | ToolCall":
    if isinstance(doc, str):
        return doc
    if isinstance(doc, dict):
        if "text" in doc:
            return str(doc["text"])
        if "tool_call" in doc:
            return ToolCall.from_json(doc["tool_call"])
    raise PortFailure(f"unrecognized scripted agent step: {doc!r}")


class ScriptedAgentPort(AgentPort):
    """Replays a fixed action sequence, ignoring history."""

    deterministic = True

    def __init__(self, script):
        self._steps = [_parse_agent_step(doc) for doc in script]
        self._next = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedAgentPort":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def next_action(self, policy_doc, tool_catalog, history, seed):
        if self._next >= len(self._steps):
            raise PortFailure("agent script exhausted")
        step = self._steps[self._next]
        self._next += 1
        return step


class ScriptedUserPort(UserPort):
    deterministic = True

    def __init__(self, script):
        self._lines = [str(line) for line in script]
        self._next = 0

    @classmethod
    def from_file(cls, path) -> "ScriptedUserPort":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def next_utterance(self, task_description, history, seed):
        if self._next >= len(self._lines):
            raise PortFailure("user script exhausted")
        line = self._lines[self._next]
        self._next += 1
        return line


# --- subprocess transport ------------------------------------------------------------

class SubprocessTransport:
    """One long-lived worker process; one JSON line out, one JSON line back."""

    def __init__(self, cmd: str, timeout: float = DEFAULT_PORT_TIMEOUT):
        self.cmd = cmd
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                shlex.split(cmd),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise PortFailure(f"cannot spawn port command {cmd!r}: {exc}") from exc
        self._buffer = bytearray()
        self._selector = selectors.DefaultSelector()
        self._selector.register(self._proc.stdout, selectors.EVENT_READ)

    def request(self, doc: dict) -> dict:
        if self._proc.poll() is not None:
            raise PortFailure(f"port process exited with {self._proc.returncode}")
        line = json.dumps(doc, sort_keys=True) + "\n"
        try:
            self._proc.stdin.write(line.encode("utf-8"))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise PortFailure(f"port stdin closed: {exc}") from exc
        raw = self._read_line()
        try:
            response = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise PortFailure(f"port response is not JSON: {raw[:200]!r}") from exc
        if not isinstance(response, dict):
            raise PortFailure("port response must be a JSON object")
        return response

    def _read_line(self) -> str:
        import time

        deadline = time.monotonic() + self.timeout
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PortFailure(f"port timed out after {self.timeout}s")
            if not self._selector.select(timeout=min(remaining, 0.5)):
                if self._proc.poll() is not None and b"\n" not in self._buffer:
                    raise PortFailure("port process exited mid-request")
                continue
            chunk = self._proc.stdout.read1(65536)
            if chunk:
                self._buffer.extend(chunk)
            elif self._proc.poll() is not None:
                raise PortFailure("port closed stdout")
        line, _, rest = bytes(self._buffer).partition(b"\n")
        self._buffer = bytearray(rest)
        return line.decode("utf-8")

    def close(self) -> None:
        try:
            self._selector.close()
        except Exception:
            pass
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def _history_json(history) -> list[dict]:
    out = []
    for turn in history:
        content = turn.content
        if isinstance(content, str):
            payload = content
        elif hasattr(content, "to_json"):
            payload = content.to_json()
        else:
            payload = str(content)
        out.append({"role": turn.role, "content": payload})
    return out


class SubprocessAgentPort(AgentPort):
    def __init__(self, cmd: str, timeout: float = DEFAULT_PORT_TIMEOUT, limits: dict | None = None):
        self.transport = SubprocessTransport(cmd, timeout)
        self.limits = limits or {}

    def next_action(self, policy_doc, tool_catalog, history, seed):
        response = self.transport.request({
            "type": "agent_turn",
            "policy": policy_doc,
            "tools": [t.to_json() for t in tool_catalog],
            "history": _history_json(history),
            "limits": self.limits,
            "seed": seed,
        })
        content = response.get("content")
        if isinstance(content, str):
            return content
        if isinstance(content, dict) and "tool_call" in content:
            return ToolCall.from_json(content["tool_call"])
        if isinstance(content, dict) and "text" in content:
            return str(content["text"])
        raise PortFailure(f"bad agent_turn content: {content!r}")

    def close(self):
        self.transport.close()


class SubprocessUserPort(UserPort):
    def __init__(self, cmd: str, timeout: float = DEFAULT_PORT_TIMEOUT, limits: dict | None = None):
        self.transport = SubprocessTransport(cmd, timeout)
        self.limits = limits or {}

    def next_utterance(self, task_description, history, seed):
        response = self.transport.request({
            "type": "user_turn",
            "task": task_description,
            "history": _history_json(history),
            "limits": self.limits,
            "seed": seed,
        })
        content = response.get("content")
        if not isinstance(content, str):
            raise PortFailure(f"bad user_turn content: {content!r}")
        return content

    def close(self):
        self.transport.close()


class SubprocessGenerationPort:
    """Generation-port shim mirroring the rollout protocol with type=generate."""

    deterministic = False

    def __init__(self, cmd: str, timeout: float = DEFAULT_PORT_TIMEOUT):
        self.transport = SubprocessTransport(cmd, timeout)

    def generate(self, stage: str, context: dict, seed: int) -> str:
        response = self.transport.request(
            {"type": "generate", "stage": stage, "context": context, "seed": seed}
        )
        content = response.get("content")
        if not isinstance(content, str):
            raise PortFailure(f"bad generate content: {content!r}")
        return content

    def close(self):
        self.transport.close()


# --- scripted port as a subprocess ------------------------------------------------------

def _serve_script(role: str, script) -> None:
    """Answer protocol requests from stdin with scripted responses."""
    agent_steps = list(script) if role == "agent" else []
    user_lines = list(script) if role == "user" else []
    gen_outputs = dict(script) if role == "generate" else {}
    for raw in sys.stdin:
        raw = raw.strip()
        if not raw:
            continue
        request = json.loads(raw)
        rtype = request.get("type")
        if rtype == "agent_turn":
            if not agent_steps:
                response = {"type": "error", "message": "agent script exhausted"}
            else:
                step = agent_steps.pop(0)
                content = step if isinstance(step, dict) else {"text": str(step)}
                response = {"type": "agent_turn", "content": content}
        elif rtype == "user_turn":
            if not user_lines:
                response = {"type": "error", "message": "user script exhausted"}
            else:
                response = {"type": "user_turn", "content": str(user_lines.pop(0))}
        elif rtype == "generate":
            queue = gen_outputs.get(request.get("stage"), [])
            if not queue:
                response = {"type": "error", "message": "no canned output for stage"}
            else:
                response = {"type": "generate", "content": queue.pop(0)}
        else:
            response = {"type": "error", "message": f"unknown request type {rtype!r}"}
        sys.stdout.write(json.dumps(response) + "\n")
        sys.stdout.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="policygym.ports",
                                     description="serve a scripted port over stdio")
    parser.add_argument("--role", choices=["agent", "user", "generate"], required=True)
    parser.add_argument("--script", required=True, help="JSON script file")
    args = parser.parse_args(argv)
    with open(args.script, encoding="utf-8") as fh:
        script = json.load(fh)
    _serve_script(args.role, script)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
