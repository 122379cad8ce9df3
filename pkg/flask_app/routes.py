import logging

from flask import Blueprint, Response, current_app, jsonify, request

import oracle
from flask_app.helpers import ReplyCache, _error_body, _parse_fitness_query

logger = logging.getLogger("flask_app.routes")

fitness_bp = Blueprint("fitness", __name__)
api_bp = Blueprint("api", __name__, url_prefix="/api")

WORLD_KEY = "EVOMERGE_WORLD"
CACHE_KEY = "evomerge_reply_cache"


def _world():
    return current_app.config[WORLD_KEY]


def _cache() -> ReplyCache:
    return current_app.extensions[CACHE_KEY]


# ============================================================
# Routes: Fitness
# ============================================================
@fitness_bp.route("/fitness", methods=["POST"])
def fitness():
    try:
        query = _parse_fitness_query(request.get_data(cache=False))
    except oracle.OracleRejectedError as e:
        logger.debug(f"Rejected query ({e.code}): {e.detail}")
        return jsonify(_error_body(e.code, e.detail)), 400

    cache = _cache()
    key = cache.key_for(query)
    body = cache.get(key)
    if body is None:
        try:
            reply = oracle.evaluate_local(_world(), query)
        except oracle.OracleRejectedError as e:
            logger.debug(f"Rejected query {query.request_id} ({e.code}): {e.detail}")
            return jsonify(_error_body(e.code, e.detail)), 400
        except oracle.NonFiniteLossError as e:
            logger.warning(f"Query {query.request_id} produced a non-finite loss: {e.detail}")
            return jsonify(_error_body(e.code, e.detail)), 400
        body = oracle.encode_reply(reply)
        cache.put(key, body)
    return Response(body, status=200, mimetype="application/json")


# ============================================================
# Routes: API - Health & World Info
# ============================================================
@api_bp.route("/health", methods=["GET"])
def api_health():
    return jsonify({"status": "ok"})


@api_bp.route("/world-info", methods=["GET"])
def api_world_info():
    return jsonify(oracle.world_info(_world()).model_dump())
