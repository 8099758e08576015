import hashlib
import logging
import os
from functools import lru_cache
from typing import Optional

from sqlalchemy.engine import Engine
from sqlmodel import SQLModel, Session, create_engine, select

from app.models import RunRecord

logger = logging.getLogger(__name__)

DEFAULT_LEDGER_URL = "sqlite:///lot_runs.db"


def resolve_ledger_url(configured: Optional[str] = None) -> str:
    return configured or os.environ.get("APP_DATABASE_URL", DEFAULT_LEDGER_URL)


@lru_cache(maxsize=8)
def get_engine(url: str) -> Engine:
    return create_engine(url, echo=False)


def create_tables(engine: Engine) -> None:
    SQLModel.metadata.create_all(engine)


def get_session(engine: Engine) -> Session:
    return Session(engine)


def reset_db(engine: Engine) -> None:
    """Wipe all ledger tables. Use with caution - for testing only!"""
    SQLModel.metadata.drop_all(engine)
    SQLModel.metadata.create_all(engine)


def config_digest(config_json: str) -> str:
    return hashlib.sha256(config_json.encode("utf-8")).hexdigest()


def record_run(engine: Engine, command: str, config_json: str, seed: int, exit_code: int, report_json: str) -> RunRecord:
    """Append one command execution to the run ledger"""
    with get_session(engine) as session:
        record = RunRecord(
            command=command,
            config_digest=config_digest(config_json),
            seed=seed,
            exit_code=exit_code,
            report_json=report_json,
        )
        session.add(record)
        session.commit()
        session.refresh(record)
        logger.info("ledger: recorded %s run %s (exit %d)", command, record.id, exit_code)
        return record


def list_runs(engine: Engine, command: Optional[str] = None) -> list[RunRecord]:
    with get_session(engine) as session:
        statement = select(RunRecord)
        if command is not None:
            statement = statement.where(RunRecord.command == command)
        return list(session.exec(statement.order_by(RunRecord.id)))  # type: ignore[arg-type]
