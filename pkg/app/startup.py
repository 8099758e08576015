import logging
import os
from typing import Optional

from sqlalchemy.engine import Engine

from app.database import create_tables, get_engine, resolve_ledger_url

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    name = (level or os.environ.get("LOT_LOG_LEVEL", "WARNING")).upper()
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(getattr(logging, name, logging.WARNING))


def startup(log_level: Optional[str] = None, ledger_url: Optional[str] = None, use_ledger: bool = False) -> Optional[Engine]:
    # called once per command before any work is done
    configure_logging(log_level)
    if not (use_ledger or ledger_url):
        return None
    engine = get_engine(resolve_ledger_url(ledger_url))
    create_tables(engine)
    return engine
