"""
Database engine and session management for the referral registry view.

The registry's source of truth is its append-only event log; the database
only holds the live state replayed from it, in memory unless a file path is given.

Contains the following functions:
    create_db_engine() - Creates a SQLAlchemy engine for an SQLite database (file or in-memory).
    create_tables() - Creates all tables in the database.
    reset_tables() - Drops and recreates the tables before a replay.
    get_session_factory() - Returns a session factory bound to an engine.
    count_rows() - Counts rows of each registry table.
"""

from pathlib import Path

from sqlalchemy import create_engine, func, select
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from dermatriage.logger import logger
from dermatriage.modules.models import AuditRecord, Base, RegistryRecord


def create_db_engine(db_path=None):
    """
    Create a SQLAlchemy engine for the registry view.

    Parameters:
    db_path (str | Path | None): SQLite file; None keeps the view in memory.

    Returns:
    Engine
    """
    if db_path is None:
        # One shared connection so every session sees the same in-memory database
        engine = create_engine(
            "sqlite://",
            connect_args={"check_same_thread": False},
            poolclass=StaticPool,
        )
        logger.debug("Created in-memory registry database")
    else:
        path = Path(db_path).resolve()
        path.parent.mkdir(parents=True, exist_ok=True)
        engine = create_engine(f"sqlite:///{path}")
        logger.debug(f"Created registry database at {path}")
    return engine


def create_tables(engine):
    """Create all tables in the database if they do not exist."""
    Base.metadata.create_all(engine)
    logger.info("Created/validated registry tables.")


def reset_tables(engine):
    """Drop and recreate the tables; replay always starts from an empty view."""
    Base.metadata.drop_all(engine)
    Base.metadata.create_all(engine)


def get_session_factory(engine):
    """Session factory bound to the engine; objects stay readable after commit."""
    return sessionmaker(bind=engine, expire_on_commit=False)


def count_rows(session):
    """Row counts for the live-entry and audit tables."""
    return {
        "registry_entries": session.scalar(select(func.count()).select_from(RegistryRecord)),
        "registry_audit": session.scalar(select(func.count()).select_from(AuditRecord)),
    }
