#!/usr/bin/env python3
"""
Startup script for the Contextual Dropout results API
"""
import uvicorn
from config import settings

def serve(host: str = settings.HOST, port: int = settings.PORT, reload: bool = False):
    uvicorn.run(
        "main:app",
        host=host,
        port=port,
        reload=reload,
        log_level=settings.LOG_LEVEL.lower()
    )

if __name__ == "__main__":
    serve(reload=True)
