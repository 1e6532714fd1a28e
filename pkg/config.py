import os
from dotenv import load_dotenv

load_dotenv()

class Settings:
    # Data Settings
    DATA_DIR: str = os.getenv("DATA_DIR", "./data")
    CACHE_DIR: str = os.getenv("CACHE_DIR", "")

    # Run Output Settings
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "./runs")

    # Database Settings
    DATABASE_URL: str = os.getenv("DATABASE_URL", "sqlite:///./dropout_runs.db")

    # Server Settings
    HOST: str = os.getenv("HOST", "0.0.0.0")
    PORT: int = int(os.getenv("PORT", "8000"))

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

settings = Settings()
