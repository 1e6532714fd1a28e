from sqlalchemy import Column, Integer, String, DateTime, Float, JSON, Enum, Boolean
from sqlalchemy.sql import func
from database.database import Base
from models.run_api_models import RunStatus

class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String, index=True)
    status = Column(Enum(RunStatus), default=RunStatus.RUNNING, index=True)
    command = Column(String, nullable=False)
    variant = Column(String, nullable=False, index=True)
    estimator = Column(String, nullable=False)
    dataset = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    noise_variance = Column(Float, default=0.0)
    ood = Column(Boolean, default=False)
    output_dir = Column(String, nullable=False)
    checkpoint_path = Column(String)
    accuracy = Column(Float)
    pavpu_005 = Column(Float)
    test_log_likelihood = Column(Float)
    steps = Column(Integer, default=0)
    wall_time = Column(Float)
    error = Column(String)
    config = Column(JSON)  # resolved RunConfig
    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), onupdate=func.now())
