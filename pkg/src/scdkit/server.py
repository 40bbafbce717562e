"""HTTP facade over the review store.

Serves the review queue and decision endpoints as JSON plus the pair
workspaces as static files, so a browser client can composite image and
instance overlays without any server-side rendering. All state changes
go through the decision endpoint and land in the store's append-only
log; nothing else mutates.
"""

from __future__ import annotations

import os
from pathlib import Path
from urllib.parse import quote

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .annotation import PseudoAnnotation
from .errors import ConfigError, ConflictError, NotFoundError
from .review import ReviewDecision, ReviewStore, utc_timestamp

DATA_ROOT_ENV = "SCD_DATA_ROOT"


class DecisionBody(BaseModel):
    action: str
    reviewer: str = "anonymous"
    instance_id: str | None = None


def pair_payload(annotation: PseudoAnnotation) -> dict:
    """JSON view of one pair: image URLs plus the live instance list.

    Static URLs point into the pair's workspace directory. The instance
    list reflects the current store state, so removed instances drop out
    even though their artifact PNGs stay on disk.
    """
    base = f"/static/{quote(annotation.pair_id)}"
    return {
        "pair_id": annotation.pair_id,
        "status": annotation.status,
        "coverage": annotation.common_view.coverage,
        "images": {"t0": f"{base}/t0.png", "t1": f"{base}/t1.png"},
        "instances": [
            {
                "instance_id": inst.instance_id,
                "change_class": inst.change_class,
                "phrase": inst.phrase,
                "area": inst.area,
                "png": f"{base}/06_pseudo/{quote(inst.instance_id or '')}.png",
            }
            for inst in annotation.instances
        ],
    }


def resolve_data_root(data_root: str | Path | None = None) -> Path:
    if data_root is None:
        data_root = os.environ.get(DATA_ROOT_ENV)
    if not data_root:
        raise ConfigError(
            f"no data root given and the {DATA_ROOT_ENV} variable is unset"
        )
    root = Path(data_root)
    if not root.is_dir():
        raise ConfigError(f"data root {root} is not a directory")
    return root


def create_app(
    data_root: str | Path | None = None,
    store: ReviewStore | None = None,
) -> FastAPI:
    root = resolve_data_root(data_root)
    if store is None:
        store = ReviewStore.from_workspace(root)

    app = FastAPI(title="scdkit review")
    app.state.store = store

    @app.exception_handler(NotFoundError)
    async def _not_found(request: Request, exc: NotFoundError) -> JSONResponse:
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(ConflictError)
    async def _conflict(request: Request, exc: ConflictError) -> JSONResponse:
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(ConfigError)
    async def _bad_request(request: Request, exc: ConfigError) -> JSONResponse:
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/api/progress")
    def progress() -> dict:
        return store.progress()

    @app.get("/api/pairs/next")
    def next_pair(session: str = Query(default="default")) -> dict:
        annotation = store.next_pending(session)
        return {
            "pair": pair_payload(annotation) if annotation else None,
            "progress": store.progress(),
        }

    @app.get("/api/pairs/{pair_id}")
    def get_pair(pair_id: str) -> dict:
        return pair_payload(store.annotation(pair_id))

    @app.post("/api/pairs/{pair_id}/decision")
    def post_decision(pair_id: str, body: DecisionBody) -> dict:
        decision = ReviewDecision(
            pair_id=pair_id,
            action=body.action,
            reviewer=body.reviewer,
            timestamp=utc_timestamp(),
            instance_id=body.instance_id,
        )
        return pair_payload(store.record(decision))

    app.mount("/static", StaticFiles(directory=root), name="static")
    return app
