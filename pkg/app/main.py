# app/main.py
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from uvicorn.middleware.proxy_headers import ProxyHeadersMiddleware
import logging
from dotenv import load_dotenv
import os

load_dotenv()

# Setup logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="SA2CO Dispatch Service",
    version="1.0.0",
)

# Proxy headers middleware - MUST be first to handle X-Forwarded-* headers from Heroku
app.add_middleware(ProxyHeadersMiddleware, trusted_hosts="*")

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=os.getenv("CORS_ALLOWED_ORIGINS", "*").split(","),
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/")
async def root():
    return {
        "message": "SA2CO dispatch service is running!",
        "endpoints": {
            "health": "/health",
            "powerflow": "/api/powerflow",
            "runs": "/api/runs",
        }
    }


@app.get("/health")
async def health_check():
    return {"status": "healthy", "service": "sa2co-dispatch"}

# Import and register routers
try:
    from app.routes.powerflow import router as powerflow_router
    from app.routes.runs import router as runs_router

    app.include_router(powerflow_router, prefix="/api", tags=["powerflow"])
    app.include_router(runs_router, prefix="/api", tags=["runs"])

except Exception as e:
    logger.error(f" Routes loading failed: {e}")
    raise e
