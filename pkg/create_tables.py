import argparse
import sys
from typing import List, Optional

from database import Base, get_engine, model_store_url
import models  # noqa: F401  registers the dictionary tables on Base


def create_tables(url: str) -> None:
    engine = get_engine(url)
    try:
        Base.metadata.create_all(bind=engine)
    finally:
        engine.dispose()


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Create the dictionary model store tables.")
    parser.add_argument("path", nargs="?", default=None, help="SQLite file or database URL (default: SVR_POSE_MODEL_URL)")
    args = parser.parse_args(argv)

    url = model_store_url(args.path)
    print("Creating model store tables...")
    create_tables(url)
    print("Model store tables created successfully!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
