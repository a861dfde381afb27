import logging

import numpy as np
import pandas as pd
import pytest

import db
from errors import CheckpointError
from jobs import trigger_job


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    monkeypatch.setenv("MIM_RUNS_DATABASE_URL", f"sqlite:///{tmp_path / 'runs.db'}")
    return tmp_path / "runs.db"


def test_ledger_is_off_without_url():
    assert not db.enabled()
    assert db.start_run("train") is None
    db.insert_df(None, "train", pd.DataFrame({"a": [1]}))
    assert db.fetch_events(1).empty


def test_runs_and_events_round_trip(ledger):
    run_id = db.start_run("train", label="desk")
    assert isinstance(run_id, int)
    frame = pd.DataFrame({"epoch": [1, 2], "accuracy": [0.5, np.nan], "split": ["train", "test"]})
    db.insert_df(run_id, "train", frame)
    db.insert_event(run_id, "note", {"value": np.float32(1.5), "values": np.arange(2)})
    db.finish_run(run_id, "ok", meta={"test_accuracy": np.float64(0.75)})

    events = db.fetch_events(run_id, source="train")
    assert list(events["epoch"]) == [1, 2]
    assert events["accuracy"].isna().iloc[1]
    note = db.fetch_events(run_id, source="note").iloc[0]
    assert note["value"] == 1.5 and note["values"] == [0, 1]

    run = db.fetch_run(run_id)
    assert run["status"] == "ok"
    assert run["label"] == "desk"
    assert run["meta"] == {"test_accuracy": 0.75}
    assert run["finished_at"] is not None


def test_json_conversion_of_special_values():
    assert db._jsonable(float("inf")) is None
    assert db._jsonable(np.int64(3)) == 3
    assert db._jsonable({"a": (np.float32(0.5), None)}) == {"a": [0.5, None]}


def test_job_records_success(ledger, caplog):
    caplog.set_level(logging.INFO)
    result = trigger_job("mi-oracle", lambda run_id, x: {"double": 2 * x, "run": run_id}, 4, label="check")
    assert result["ok"]
    assert result["meta"]["double"] == 8
    assert db.fetch_run(result["run_id"])["status"] == "ok"
    assert "=== MI ORACLE JOB STARTED ===" in caplog.text
    assert "=== MI ORACLE JOB FINISHED OK ===" in caplog.text
    assert "sqlite" not in caplog.text


def test_job_failure_records_category_and_reraises(ledger, caplog):
    seen = {}

    def broken(run_id):
        seen["run_id"] = run_id
        raise CheckpointError("bad magic")

    with pytest.raises(CheckpointError):
        trigger_job("eval", broken)
    run = db.fetch_run(seen["run_id"])
    assert run["status"] == "error"
    assert run["meta"] == {"error": "bad magic", "category": "checkpoint"}
    assert "=== EVAL JOB ERROR ===" in caplog.text


def test_job_needs_a_name():
    with pytest.raises(ValueError):
        trigger_job("", lambda run_id: None)
