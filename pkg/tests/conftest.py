"""Shared fixtures: the corporate-travel package materialized once per session."""

from __future__ import annotations

import sqlite3

import pytest

from policygym import load_package
from policygym.fixtures import corporate_travel
from policygym.snapshots import Snapshot, temp_db_path


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("pkg") / "corporate_travel"
    corporate_travel.build(path)
    return path


@pytest.fixture(scope="session")
def travel_pkg(fixture_dir):
    return load_package(fixture_dir)


def snapshot_from_sql(statements) -> Snapshot:
    """Build a snapshot by executing raw SQL on a fresh database."""
    with temp_db_path() as path:
        conn = sqlite3.connect(path)
        try:
            for stmt in statements:
                if isinstance(stmt, tuple):
                    conn.execute(stmt[0], stmt[1])
                else:
                    conn.executescript(stmt)
            conn.commit()
        finally:
            conn.close()
        return Snapshot.from_file(path)
