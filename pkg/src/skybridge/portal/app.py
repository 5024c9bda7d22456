"""HTTP/WebSocket surface of the portal.

REST endpoints cover deployment and management; the /ws endpoint carries the
envelope stream for service sessions. Authentication, when configured, is a
static bearer token (Authorization header on REST, ?token= on the socket).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, Query, Request, Response, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from ..choreographer import Choreographer, NodePool, SlaDictionary, UnknownServant
from ..demo import default_node_pool_doc
from ..manifest import ManifestSyntaxError, ValidationError
from .core import ConflictError, PortalCore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PortalConfig:
    host: str = "127.0.0.1"
    port: int = 8008
    token: str = ""
    sla_dictionary: str | None = None
    node_pool: str | None = None
    portal_url: str = ""

    def ws_url(self) -> str:
        return self.portal_url or f"ws://{self.host}:{self.port}/ws"


def load_config(path: str | Path) -> PortalConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    base = Path(path).parent
    def _resolve(key):
        value = doc.get(key)
        if value is None:
            return None
        p = Path(value)
        return str(p if p.is_absolute() else base / p)
    return PortalConfig(
        host=doc.get("host", "127.0.0.1"),
        port=int(doc.get("port", 8008)),
        token=doc.get("token", ""),
        sla_dictionary=_resolve("sla_dictionary"),
        node_pool=_resolve("node_pool"),
        portal_url=doc.get("portal_url", ""),
    )


def build_core(config: PortalConfig) -> PortalCore:
    dictionary = (SlaDictionary.from_file(config.sla_dictionary)
                  if config.sla_dictionary else SlaDictionary([]))
    pool = (NodePool.from_file(config.node_pool) if config.node_pool
            else NodePool.from_json(json.dumps(default_node_pool_doc())))
    return PortalCore(Choreographer(dictionary, pool), portal_url=config.ws_url())


def create_app(config: PortalConfig | None = None, core: PortalCore | None = None) -> FastAPI:
    config = config or PortalConfig()
    core = core or build_core(config)
    app = FastAPI(title="skybridge portal", docs_url=None, redoc_url=None)
    app.state.core = core
    app.state.config = config

    def _unauthorized(request: Request) -> JSONResponse | None:
        if not config.token:
            return None
        header = request.headers.get("authorization", "")
        if header == f"Bearer {config.token}":
            return None
        return JSONResponse({"detail": "missing or bad bearer token"}, status_code=401)

    @app.post("/packages")
    async def deploy_package(request: Request, replace: bool = Query(default=False)):
        if (denied := _unauthorized(request)) is not None:
            return denied
        body = await request.body()
        try:
            entry = core.deploy(body, replace=replace)
        except (ManifestSyntaxError, ValidationError) as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        except ConflictError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)
        return JSONResponse({"service": entry.service,
                             "deployed_at": entry.deployed_at}, status_code=201)

    @app.get("/services")
    async def list_services(request: Request):
        if (denied := _unauthorized(request)) is not None:
            return denied
        return [_service_view(e) for e in core.catalog.values()]

    @app.get("/services/{name}")
    async def get_service(name: str, request: Request):
        if (denied := _unauthorized(request)) is not None:
            return denied
        entry = core.catalog.get(name)
        if entry is None:
            return JSONResponse({"detail": f"unknown service {name!r}"}, status_code=404)
        view = _service_view(entry)
        view["manifest"] = json.loads(entry.manifest_bytes)
        return view

    @app.get("/servants")
    async def list_servants(request: Request):
        if (denied := _unauthorized(request)) is not None:
            return denied
        return core.servants_view()

    @app.delete("/servants/{servant_id}")
    async def delete_servant(servant_id: str, request: Request):
        if (denied := _unauthorized(request)) is not None:
            return denied
        try:
            await core.terminate_servant(servant_id)
        except UnknownServant:
            return JSONResponse({"detail": f"unknown servant {servant_id!r}"},
                                status_code=404)
        return Response(status_code=204)

    @app.get("/stubs/{service}")
    async def get_stub(service: str, request: Request):
        if (denied := _unauthorized(request)) is not None:
            return denied
        entry = core.catalog.get(service)
        if entry is None:
            return JSONResponse({"detail": f"unknown service {service!r}"}, status_code=404)
        return Response(content=entry.stub_descriptor_bytes,
                        media_type="application/json")

    @app.get("/metrics")
    async def metrics(request: Request):
        if (denied := _unauthorized(request)) is not None:
            return denied
        return dict(core.metrics)

    @app.websocket("/ws")
    async def envelope_stream(websocket: WebSocket, token: str = Query(default="")):
        if config.token and token != config.token:
            await websocket.close(code=4401)
            return
        await websocket.accept()

        async def send(raw: bytes) -> None:
            await websocket.send_text(raw.decode("utf-8"))

        peer = f"{websocket.client.host}:{websocket.client.port}" if websocket.client else ""
        session = core.open_session(send, peer=peer)
        try:
            while True:
                message = await websocket.receive()
                if message["type"] == "websocket.disconnect":
                    break
                raw = message.get("text")
                data = raw.encode("utf-8") if raw is not None else (message.get("bytes") or b"")
                await core.handle_frame(session, data)
        except WebSocketDisconnect:
            pass
        finally:
            await core.close_session(session)

    return app


def _service_view(entry) -> dict:
    return {
        "service": entry.service,
        "stateful": entry.manifest.stateful,
        "version": entry.manifest.version,
        "deployed_at": entry.deployed_at,
        "rpcs": [r.name for r in entry.manifest.interface.rpcs],
        "topics": [t.name for t in entry.manifest.interface.topics],
    }
