from .database import get_db, engine, init_db, SessionLocal
from .models import Run
