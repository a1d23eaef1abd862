from contextlib import contextmanager
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from pipeline_utils import PipelineError, env_str

# Model store URL; an explicit path on the command line takes precedence
DEFAULT_MODEL_URL = "sqlite:///dictionary.db"

# Base class for models
Base = declarative_base()


def model_store_url(path: Optional[str] = None) -> str:
    if path:
        return path if "://" in path else f"sqlite:///{path}"
    return env_str("SVR_POSE_MODEL_URL", "") or DEFAULT_MODEL_URL


# pool_pre_ping: test connections before use to catch stale ones on server databases
def get_engine(url: str) -> Engine:
    try:
        return create_engine(url, pool_pre_ping=True)
    except Exception as exc:
        raise PipelineError("model_store", "Unable to open model store", detail=f"{url}: {exc}") from exc


# Session scoped to a single save or load
@contextmanager
def get_db(url: str) -> Iterator[Session]:
    engine = get_engine(url)
    SessionLocal = sessionmaker(autoflush=False, bind=engine)
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
        engine.dispose()
