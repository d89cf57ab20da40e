import pytest
import sqlite3
from contextlib import contextmanager
import app.db as db

# -----------------------------------------------------------------------------
# FIXTURES
# -----------------------------------------------------------------------------


@pytest.fixture
def mock_db_connection(mocker):
    """
    Creates an in-memory SQLite database and mocks the app.db.get_db_connection
    context manager using the pytest-mock 'mocker' fixture.
    """
    conn = sqlite3.connect(":memory:")
    conn.row_factory = sqlite3.Row

    @contextmanager
    def mock_ctx_manager():
        yield conn

    mocker.patch("app.db.get_db_connection", side_effect=mock_ctx_manager)

    yield conn

    conn.close()


REPORT = {"variant": "linear", "total": 0.375, "accuracy": {"object": 0.5}}

# -----------------------------------------------------------------------------
# TESTS
# -----------------------------------------------------------------------------


def test_init_db(mock_db_connection, mocker):
    """Ensure the runs table and its index exist."""
    mocker.patch("os.chmod")
    mocker.patch("os.path.exists", return_value=True)

    assert db.init_db() is True

    cursor = mock_db_connection.execute("SELECT name FROM sqlite_master WHERE type='table' AND name='runs';")
    assert cursor.fetchone() is not None
    cursor = mock_db_connection.execute("SELECT name FROM sqlite_master WHERE type='index' AND name='idx_config_hash';")
    assert cursor.fetchone() is not None


def test_record_and_read_runs(mock_db_connection, mocker):
    mocker.patch("os.chmod")
    db.init_db()

    db.record_run("h1", "linear", "ok", REPORT, label="prompt-unaware (linear)", split_hash="s1")
    db.record_run("h1", "global_plus_local", "failed", label="w/ global + local")

    runs = db.recent_runs(10)
    assert [r["variant"] for r in runs] == ["global_plus_local", "linear"]
    assert runs[0]["status"] == "failed" and runs[0]["report"] is None
    assert runs[1]["report"] == REPORT
    assert runs[1]["split_hash"] == "s1"
    assert db.recent_runs(1)[0]["variant"] == "global_plus_local"


def test_registry_on_disk(isolated_app_home):
    assert db.init_db() is True
    db.record_run("h2", "local_only", "ok", REPORT)

    assert (isolated_app_home / "runs.db").exists()
    assert db.recent_runs()[0]["config_hash"] == "h2"


def test_init_db_failure(mocker, capsys):
    mocker.patch("app.db.get_db_connection", side_effect=sqlite3.OperationalError("disk I/O error"))

    assert db.init_db() is False
    assert "✗ [DB ERROR]" in capsys.readouterr().out


def test_read_errors_are_reported_not_raised(mock_db_connection, capsys):
    # No table yet.
    assert db.recent_runs() == []
    assert "Failed to read run registry" in capsys.readouterr().out


def test_record_errors_are_reported_not_raised(mock_db_connection, capsys):
    db.record_run("h3", "linear", "ok")
    assert "Failed to record run linear" in capsys.readouterr().out


def test_show_runs(mock_db_connection, mocker, capsys):
    mocker.patch("os.chmod")
    db.init_db()
    db.show_runs()
    assert "No runs recorded yet" in capsys.readouterr().out

    db.record_run("abcdef1234567890", "linear", "ok", REPORT, label="prompt-unaware (linear)")
    db.record_run("abcdef1234567890", "cross_attention", "failed")
    db.show_runs()

    out = capsys.readouterr().out
    assert "prompt-unaware (linear)" in out and "0.3750" in out
    assert "cross_attention" in out and "abcdef123456" in out
