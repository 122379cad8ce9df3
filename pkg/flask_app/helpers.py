import json
import logging
import threading
from collections import OrderedDict
from typing import Any, Dict, Optional, Tuple

from pydantic import ValidationError

from models import FitnessQuery
from oracle import BadStageError, QueryParseError

logger = logging.getLogger("flask_app.helpers")


# ============================================================
# Helper: Query parsing
# ============================================================
def _reject_constant(name: str):
    raise ValueError(f"non-finite literal {name} is not allowed")


def _parse_fitness_query(raw: bytes) -> FitnessQuery:
    """
    Decodes a POST /fitness body. Raises QueryParseError for anything that is not a
    well-formed query and BadStageError when the stage is not 1 or 2.
    """
    try:
        data = json.loads(raw.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, ValueError) as e:
        raise QueryParseError(f"body is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise QueryParseError("body must be a JSON object")
    if "stage" not in data:
        raise QueryParseError("missing field 'stage'")
    stage = data["stage"]
    if isinstance(stage, bool) or not isinstance(stage, int) or stage not in (1, 2):
        raise BadStageError(f"stage must be 1 or 2, got {stage!r}")
    try:
        return FitnessQuery.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise QueryParseError(f"{where}: {first.get('msg', 'invalid value')}".strip(": ")) from e


def _canonical_payload(query: FitnessQuery) -> str:
    return json.dumps(
        {"stage": query.stage, "alphas": query.alphas, "betas": query.betas},
        sort_keys=True,
    )


# ============================================================
# Helper: Reply cache
# ============================================================
class ReplyCache:
    """Bounded LRU of encoded replies keyed by (request_id, canonical payload)."""

    def __init__(self, max_entries: int = 4096):
        self.max_entries = max_entries
        self._entries: "OrderedDict[Tuple[str, str], str]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0

    def key_for(self, query: FitnessQuery) -> Tuple[str, str]:
        return query.request_id, _canonical_payload(query)

    def get(self, key: Tuple[str, str]) -> Optional[str]:
        if self.max_entries <= 0:
            return None
        with self._lock:
            body = self._entries.get(key)
            if body is not None:
                self._entries.move_to_end(key)
                self.hits += 1
            return body

    def put(self, key: Tuple[str, str], body: str) -> None:
        if self.max_entries <= 0:
            return
        with self._lock:
            self._entries[key] = body
            self._entries.move_to_end(key)
            while len(self._entries) > self.max_entries:
                self._entries.popitem(last=False)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def _error_body(code: str, detail: str) -> Dict[str, Any]:
    return {"error": code, "detail": detail}
