"""Rollout engine: episode loop, trajectory recording, metrics, export."""

from __future__ import annotations

import dataclasses
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policygym.errors import InsufficientTrials
from policygym.fixtures import corporate_travel
from policygym.ports import ScriptedAgentPort, ScriptedUserPort
from policygym.rollout import (
    Trajectory,
    compute_metrics,
    detect_stop,
    export_trajectory,
    import_trajectory,
    pass_at_k,
    pass_hat_k,
    run_episode,
)


def oracle_ports():
    agent = ScriptedAgentPort(corporate_travel.ORACLE_AGENT_SCRIPT)
    user = ScriptedUserPort(corporate_travel.ORACLE_USER_SCRIPT)
    return agent, user


def test_detect_stop_standalone_rule():
    assert detect_stop("###STOP###", "###STOP###")
    assert detect_stop("  ###STOP###\n", "###STOP###")
    assert not detect_stop("ok ###STOP###", "###STOP###")
    assert not detect_stop("", "###STOP###")


def test_oracle_episode_succeeds(travel_pkg):
    agent, user = oracle_ports()
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    assert trajectory.termination == "stop_signal"
    assert trajectory.r_final == 1
    assert trajectory.final_diff == 0
    roles = [t.role for t in trajectory.turns]
    assert roles.count("user") == 5
    assert roles.count("agent_tool") == 5
    assert roles.count("tool_result") == 5
    # user turns never adjacent
    for a, b in zip(roles, roles[1:]):
        assert not (a == "user" and b == "user")


def test_oracle_rewards_telescope(travel_pkg):
    agent, user = oracle_ports()
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    tool_turns = trajectory.tool_turns()
    proximities = [t.proximity for t in tool_turns]
    assert all(0.0 <= p <= 1.0 for p in proximities)
    p_first_prev = 1 - min(travel_pkg.delta0, travel_pkg.delta0) / (
        travel_pkg.delta0 + travel_pkg.diff_config.epsilon
    )
    assert sum(trajectory.dense_rewards()) == pytest.approx(
        proximities[-1] - p_first_prev, abs=1e-9
    )
    assert proximities[-1] == 1.0
    assert trajectory.sum_dense == pytest.approx(1.0, abs=1e-6)


def test_turn_field_contract(travel_pkg):
    agent, user = oracle_ports()
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    for turn in trajectory.turns:
        if turn.role == "agent_tool":
            assert turn.proximity is not None and turn.reward is not None
            assert turn.mask_in_loss is False
        else:
            assert turn.proximity is None and turn.reward is None
        if turn.role in ("user", "tool_result"):
            assert turn.mask_in_loss is True
        if turn.role == "agent_text":
            assert turn.mask_in_loss is False


def test_budget_exhausted_when_user_never_stops(travel_pkg):
    pkg = dataclasses.replace(
        travel_pkg, limits=dataclasses.replace(travel_pkg.limits, max_turns=6)
    )
    agent = ScriptedAgentPort([{"text": f"thinking {i}"} for i in range(40)])
    user = ScriptedUserPort([f"keep going {i}" for i in range(40)])
    trajectory = run_episode(pkg, agent, user, seed=0)
    assert trajectory.termination == "budget_exhausted"
    assert sum(1 for t in trajectory.turns if t.role == "user") == 6
    assert trajectory.r_final == 0


def test_immediate_stop_yields_zero_agent_turns(travel_pkg):
    agent = ScriptedAgentPort([])
    user = ScriptedUserPort(["###STOP###"])
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    assert trajectory.termination == "stop_signal"
    assert [t.role for t in trajectory.turns] == ["user"]
    assert trajectory.final_diff == travel_pkg.delta0
    assert trajectory.r_final == 0


def test_port_failure_returns_partial_trajectory(travel_pkg):
    class ExplodingUser:
        def next_utterance(self, task, history, seed):
            raise RuntimeError("simulated outage")

    trajectory = run_episode(travel_pkg, ScriptedAgentPort([]), ExplodingUser(), seed=0)
    assert trajectory.termination == "deviation"
    assert "user port failure" in trajectory.note

    agent_fail = ScriptedAgentPort([])  # exhausts immediately -> PortFailure
    user = ScriptedUserPort(["please book the flight"])
    trajectory = run_episode(travel_pkg, agent_fail, user, seed=0)
    assert trajectory.termination == "deviation"
    assert "agent port failure" in trajectory.note


def test_violation_turn_rewards_minus_lambda(travel_pkg):
    agent = ScriptedAgentPort([
        {"tool_call": {"tool_name": "insert_flight_bookings", "arguments": {
            "travel_request_id": 1, "flight_code": "FL-900", "cost": 100,
            "class": "ECONOMY", "departure_step": 30, "booking_step": 12}}},
        {"text": "that was rejected"},
    ])
    user = ScriptedUserPort(["book a 4th flight on the onboarding trip", "###STOP###"])
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    rewards = trajectory.dense_rewards()
    assert rewards == [-travel_pkg.diff_config.lambda_err]
    result_turn = [t for t in trajectory.turns if t.role == "tool_result"][0]
    assert result_turn.content.error.code == "QUOTA_EXCEEDED"


def test_deviation_detector_hook(travel_pkg):
    agent, user = oracle_ports()
    trajectory = run_episode(
        travel_pkg, agent, user, seed=0,
        deviation_detector=lambda turns: len(turns) >= 2,
    )
    assert trajectory.termination == "deviation"


def test_export_import_round_trip(travel_pkg, tmp_path):
    agent, user = oracle_ports()
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    path = tmp_path / "episode.jsonl"
    export_trajectory(trajectory, path)
    again = import_trajectory(path)
    assert again == trajectory


def test_export_replay_is_byte_identical(travel_pkg, tmp_path):
    paths = []
    for i in range(2):
        agent, user = oracle_ports()
        trajectory = run_episode(travel_pkg, agent, user, seed=7)
        path = tmp_path / f"run{i}.jsonl"
        export_trajectory(trajectory, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_export_empty_trajectory_header_only(tmp_path):
    empty = Trajectory(package_id="p", turns=(), termination="budget_exhausted",
                       final_diff=3, r_final=0, sum_dense=0.0)
    path = tmp_path / "empty.jsonl"
    export_trajectory(empty, path)
    lines = path.read_text("utf-8").strip().splitlines()
    assert len(lines) == 1
    assert import_trajectory(path) == empty


def test_rescoring_from_export_matches(travel_pkg, tmp_path):
    agent, user = oracle_ports()
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    path = tmp_path / "episode.jsonl"
    export_trajectory(trajectory, path)
    from policygym.cli import _rescore

    rescored = _rescore(travel_pkg, import_trajectory(path))
    assert rescored.sum_dense == pytest.approx(trajectory.sum_dense, abs=1e-12)
    assert rescored.r_final == trajectory.r_final
    assert [t.reward for t in rescored.tool_turns()] == pytest.approx(
        trajectory.dense_rewards(), abs=1e-12
    )


# --- metrics -------------------------------------------------------------------

def test_pass_metrics_match_contract_examples():
    assert pass_hat_k(4, 3, 2) == pytest.approx(0.5)
    assert pass_at_k(4, 3, 2) == pytest.approx(1.0)
    for k in range(1, 5):
        assert pass_at_k(4, 4, k) == 1.0
        assert pass_hat_k(4, 4, k) == 1.0


def test_metrics_match_exhaustive_enumeration():
    for n in range(1, 7):
        for c in range(0, n + 1):
            outcomes = [1] * c + [0] * (n - c)
            for k in range(1, n + 1):
                subsets = list(itertools.combinations(outcomes, k))
                any_rate = sum(1 for s in subsets if any(s)) / len(subsets)
                all_rate = sum(1 for s in subsets if all(s)) / len(subsets)
                assert pass_at_k(n, c, k) == pytest.approx(any_rate, abs=1e-12)
                assert pass_hat_k(n, c, k) == pytest.approx(all_rate, abs=1e-12)


@given(
    n=st.integers(min_value=1, max_value=12),
    data=st.data(),
)
@settings(max_examples=200, deadline=None)
def test_pass_hat_never_exceeds_pass_at(n, data):
    c = data.draw(st.integers(min_value=0, max_value=n))
    k = data.draw(st.integers(min_value=1, max_value=n))
    assert pass_hat_k(n, c, k) <= pass_at_k(n, c, k) + 1e-12


def test_compute_metrics_means_and_errors():
    outcomes = [
        {"task_id": "a", "successes": 3, "trials": 4},
        {"task_id": "b", "successes": 4, "trials": 4},
    ]
    metrics = compute_metrics(outcomes, 2)
    assert metrics["pass_at_k"] == pytest.approx((1.0 + 1.0) / 2)
    assert metrics["pass_hat_k"] == pytest.approx((0.5 + 1.0) / 2)
    with pytest.raises(InsufficientTrials):
        compute_metrics(outcomes, 5)
    with pytest.raises(InsufficientTrials):
        compute_metrics([], 1)
    with pytest.raises(InsufficientTrials):
        pass_at_k(4, 3, 0)


def test_agent_multiple_tools_within_one_user_turn(travel_pkg):
    agent = ScriptedAgentPort([
        {"tool_call": {"tool_name": "query_users", "arguments": {}}},
        {"tool_call": {"tool_name": "query_companies", "arguments": {}}},
        {"tool_call": {"tool_name": "query_travel_requests", "arguments": {}}},
        {"text": "here is everything I found"},
    ])
    user = ScriptedUserPort(["give me a full overview", "###STOP###"])
    trajectory = run_episode(travel_pkg, agent, user, seed=0)
    roles = [t.role for t in trajectory.turns]
    assert roles == [
        "user",
        "agent_tool", "tool_result",
        "agent_tool", "tool_result",
        "agent_tool", "tool_result",
        "agent_text",
        "user",
    ]
    # read-only queries do not move the state
    assert all(r == 0.0 for r in trajectory.dense_rewards())
