import logging
from typing import Generator, Optional

from sqlalchemy.engine import Engine
from sqlalchemy_utils import create_database, database_exists
from sqlmodel import Session, SQLModel, create_engine

from app.config import get_database_url

# Import all models here to ensure they are registered with SQLModel's metadata
from app import models  # noqa: F401

logger = logging.getLogger(__name__)

_engine: Optional[Engine] = None


def get_engine(url: Optional[str] = None) -> Engine:
    """Engine for the results ledger, created on first use."""
    global _engine
    if url is not None:
        return create_engine(url, echo=False)
    if _engine is None:
        _engine = create_engine(get_database_url(), echo=False)
    return _engine


def create_db_and_tables(engine: Optional[Engine] = None) -> Engine:
    """Create database if it doesn't exist, then create all tables."""
    engine = engine or get_engine()
    if not database_exists(engine.url):
        logger.info("creating results database %s", engine.url)
        create_database(engine.url)
    SQLModel.metadata.create_all(engine)
    return engine


def get_session(engine: Optional[Engine] = None) -> Generator[Session, None, None]:
    with Session(engine or get_engine()) as session:
        yield session
