from typing import List, Optional

from sqlalchemy import Column, Float, ForeignKey, Integer, LargeBinary, String, Text
from sqlalchemy.orm import Session, relationship

from database import Base


# Dictionary model header
class DictionaryModelRecord(Base):
    __tablename__ = "dictionary_models"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String(255), unique=True, nullable=False, index=True)
    descriptor_size = Column(Integer, nullable=False)
    similarity = Column(String(16), nullable=False)
    slice_size = Column(Integer, nullable=False)
    slice_spacing = Column(Float, nullable=False)
    anchor_scale = Column(Float, nullable=False)
    entry_count = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=True)

    entries = relationship(
        "DictionaryEntryRecord",
        back_populates="model",
        order_by="DictionaryEntryRecord.position",
        cascade="all, delete-orphan",
    )


# One pose and its descriptor; arrays are little-endian float64 blobs
class DictionaryEntryRecord(Base):
    __tablename__ = "dictionary_entries"

    id = Column(Integer, primary_key=True, index=True)
    model_id = Column(Integer, ForeignKey("dictionary_models.id"), nullable=False, index=True)
    position = Column(Integer, nullable=False)
    slice_id = Column(String(64), nullable=False)
    rotation = Column(LargeBinary, nullable=False)
    translation = Column(LargeBinary, nullable=False)
    descriptor = Column(LargeBinary, nullable=False)

    model = relationship("DictionaryModelRecord", back_populates="entries")


# Function to get a stored model by name
def get_model_record(db: Session, name: str) -> Optional[DictionaryModelRecord]:
    return db.query(DictionaryModelRecord).filter(DictionaryModelRecord.name == name).one_or_none()


# Function to list stored model names
def list_model_names(db: Session) -> List[str]:
    return [row.name for row in db.query(DictionaryModelRecord).order_by(DictionaryModelRecord.id).all()]
