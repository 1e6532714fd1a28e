from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from database.database import init_db
from api.run_routes import router as run_router

# Create database tables
init_db()

app = FastAPI(
    title="Contextual Dropout",
    description="Results API over trained contextual-dropout runs: metrics, summaries and uncertainty-aware predictions",
    version="1.0.0"
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(run_router)

@app.get("/")
async def read_root():
    return {
        "message": "Welcome to the Contextual Dropout results API",
        "version": "1.0.0",
        "docs": "/docs",
        "redoc": "/redoc"
    }

@app.get("/health")
async def health_check():
    return {"status": "healthy"}
