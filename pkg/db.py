# db.py
"""
Run ledger: every CLI job gets a `runs` row, and jobs attach `events` rows
(training metrics, ablation summaries) to it.

The ledger is on only when MIM_RUNS_DATABASE_URL is set; otherwise start_run
returns None and the other calls do nothing.
"""
import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from sqlalchemy import (
    JSON,
    BigInteger,
    Column,
    DateTime,
    ForeignKey,
    Index,
    Integer,
    MetaData,
    String,
    Table,
    create_engine,
    update,
)

from config import runs_database_url

logger = logging.getLogger(__name__)

_ENGINES: Dict[str, Any] = {}

ID = BigInteger().with_variant(Integer, "sqlite")

metadata = MetaData()

runs = Table(
    "runs",
    metadata,
    Column("id", ID, primary_key=True, autoincrement=True),
    Column("source", String, nullable=False),
    Column("label", String, default=""),
    Column("started_at", DateTime(timezone=True), nullable=False),
    Column("finished_at", DateTime(timezone=True)),
    Column("status", String, nullable=False, default="running"),
    Column("meta", JSON),
)

events = Table(
    "events",
    metadata,
    Column("id", ID, primary_key=True, autoincrement=True),
    Column("run_id", ID, ForeignKey("runs.id", ondelete="SET NULL")),
    Column("source", String, nullable=False),
    Column("created_at", DateTime(timezone=True), nullable=False),
    Column("payload", JSON, nullable=False),
    Index("idx_events_source_created", "source", "created_at"),
    Index("idx_events_run_id", "run_id"),
)


def _utcnow():
    return datetime.now(timezone.utc)


def enabled() -> bool:
    return bool(runs_database_url())


def _engine():
    url = runs_database_url()
    if not url:
        return None
    eng = _ENGINES.get(url)
    if eng is not None:
        return eng
    kwargs: Dict[str, Any] = {"pool_pre_ping": True}
    if not url.startswith("sqlite"):
        kwargs.update(
            pool_size=int(os.getenv("MIM_DB_POOL_SIZE", "5")),
            max_overflow=int(os.getenv("MIM_DB_MAX_OVERFLOW", "10")),
            pool_recycle=int(os.getenv("MIM_DB_POOL_RECYCLE", "1800")),
        )
    eng = create_engine(url, **kwargs)
    _ENGINES[url] = eng
    return eng


def _jsonable(obj: Any) -> Any:
    """Convert pandas/numpy/datetime values into JSON-safe types."""
    if obj is None:
        return None

    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None

    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]

    # pandas NaN / NA
    try:
        if pd.isna(obj):
            return None
    except (TypeError, ValueError):
        pass

    if isinstance(obj, datetime):
        return obj.isoformat()

    # keep if json supports, else stringify
    try:
        json.dumps(obj)
        return obj
    except (TypeError, ValueError):
        return str(obj)


def init_db() -> None:
    """Create tables and indexes if needed."""
    eng = _engine()
    if eng is None:
        return
    metadata.create_all(eng, checkfirst=True)


def start_run(source: str, label: str = "") -> Optional[int]:
    eng = _engine()
    if eng is None:
        return None
    init_db()
    with eng.begin() as conn:
        res = conn.execute(
            runs.insert().values(source=source, label=label or "", started_at=_utcnow(), status="running")
        )
        return int(res.inserted_primary_key[0])


def finish_run(run_id: Optional[int], status: str, meta: Optional[Dict[str, Any]] = None) -> None:
    eng = _engine()
    if eng is None or run_id is None:
        return
    with eng.begin() as conn:
        conn.execute(
            update(runs)
            .where(runs.c.id == int(run_id))
            .values(status=status, finished_at=_utcnow(), meta=_jsonable(meta))
        )


def insert_event(run_id: Optional[int], source: str, payload: Dict[str, Any]) -> None:
    eng = _engine()
    if eng is None or run_id is None:
        return
    with eng.begin() as conn:
        conn.execute(
            events.insert().values(run_id=int(run_id), source=source, created_at=_utcnow(), payload=_jsonable(payload) or {})
        )


def insert_df(run_id: Optional[int], source: str, df: Optional[pd.DataFrame]) -> None:
    """One event per DataFrame row."""
    if df is None or df.empty:
        return
    eng = _engine()
    if eng is None or run_id is None:
        return

    rows = df.astype(object).where(pd.notnull(df), None).to_dict(orient="records")
    now = _utcnow()
    with eng.begin() as conn:
        conn.execute(
            events.insert(),
            [{"run_id": int(run_id), "source": source, "created_at": now, "payload": _jsonable(r) or {}} for r in rows],
        )
    logger.debug("[db] %d %s events for run %s", len(rows), source, run_id)


def fetch_events(run_id: int, source: Optional[str] = None) -> pd.DataFrame:
    """Payloads of a run's events, one row each (empty frame when the ledger is off)."""
    eng = _engine()
    if eng is None:
        return pd.DataFrame()
    stmt = events.select().where(events.c.run_id == int(run_id)).order_by(events.c.id)
    if source:
        stmt = stmt.where(events.c.source == source)
    with eng.connect() as conn:
        payloads = [row.payload for row in conn.execute(stmt)]
    return pd.DataFrame(payloads)


def fetch_run(run_id: int) -> Optional[Dict[str, Any]]:
    eng = _engine()
    if eng is None:
        return None
    with eng.connect() as conn:
        row = conn.execute(runs.select().where(runs.c.id == int(run_id))).mappings().first()
    return dict(row) if row else None
