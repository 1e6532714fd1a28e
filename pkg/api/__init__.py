from .run_routes import router as run_router
