#!/usr/bin/env python3
"""
app.py – Flask fitness server for evomerge.
Answers POST /fitness over a loaded world and exposes /api/health and /api/world-info.
The world stays on the server; clients only ever send decision vectors.
"""

import logging
import threading
from dataclasses import dataclass

from flask import Flask
from werkzeug.serving import make_server

from flask_app.helpers import ReplyCache
from flask_app.routes import CACHE_KEY, WORLD_KEY, api_bp, fitness_bp

logger = logging.getLogger("app")


class BindError(OSError):
    """The server could not bind its address."""


def create_app(world, reply_cache_size: int = 4096) -> Flask:
    app = Flask(__name__)
    app.config[WORLD_KEY] = world
    app.config["MAX_CONTENT_LENGTH"] = 16 * 1024 * 1024  # 16 MB
    app.extensions[CACHE_KEY] = ReplyCache(reply_cache_size)
    app.register_blueprint(fitness_bp)
    app.register_blueprint(api_bp)
    return app


def _make_server(world, host: str, port: int, reply_cache_size: int):
    app = create_app(world, reply_cache_size)
    try:
        return make_server(host, port, app, threaded=True)
    except OSError as e:
        raise BindError(f"cannot bind {host}:{port}: {e}") from e
    except SystemExit as e:
        # werkzeug exits instead of raising when the port is taken
        raise BindError(f"cannot bind {host}:{port}") from e


def serve(world, host: str = "127.0.0.1", port: int = 8765, reply_cache_size: int = 4096) -> None:
    """Blocks answering queries until interrupted."""
    server = _make_server(world, host, port, reply_cache_size)
    logger.info(f"Fitness server listening on http://{host}:{server.server_port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("Shutdown requested.")
    finally:
        server.server_close()
        logger.info("Fitness server stopped.")


@dataclass
class ServerHandle:
    url: str
    _server: object
    _thread: threading.Thread

    def shutdown(self) -> None:
        self._server.shutdown()
        self._thread.join(timeout=10)
        self._server.server_close()
        logger.info(f"Background fitness server at {self.url} stopped.")

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def start_background_server(
    world, host: str = "127.0.0.1", port: int = 0, reply_cache_size: int = 4096
) -> ServerHandle:
    """Starts a server on a daemon thread; port 0 picks a free port."""
    server = _make_server(world, host, port, reply_cache_size)
    thread = threading.Thread(target=server.serve_forever, name="fitness-server", daemon=True)
    thread.start()
    url = f"http://{host}:{server.server_port}"
    logger.info(f"Background fitness server listening on {url}")
    return ServerHandle(url=url, _server=server, _thread=thread)
