# File: oracle.py
# Black-box loss interface: softmax cross-entropy over a linear model, a local
# evaluator over a synthetic world and an HTTP client for a remote fitness server.

import json
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Mapping, Optional

import numpy as np
import requests
from requests.adapters import HTTPAdapter
from pydantic import ValidationError

import lowrank
from models import (
    ERROR_BAD_STAGE,
    ERROR_DIM_MISMATCH,
    ERROR_NON_FINITE,
    ERROR_PARSE,
    ErrorReply,
    FitnessQuery,
    FitnessReply,
    WorldInfo,
)

if TYPE_CHECKING:
    from synth import SynthWorld

logger = logging.getLogger(__name__)


# ============================================================
# Errors
# ============================================================
class OracleError(RuntimeError):
    """Base class for oracle failures."""


class OracleTransportError(OracleError):
    pass


class MalformedReplyError(OracleError):
    pass


class RequestIdMismatchError(OracleError):
    pass


class NonFiniteLossError(OracleError):
    """The merged model scores a NaN or infinite loss."""

    code = ERROR_NON_FINITE

    def __init__(self, detail: str = ""):
        self.detail = detail
        super().__init__(detail)


class OracleRejectedError(OracleError):
    """The oracle refused a query; carries the wire error code."""

    code = ERROR_PARSE

    def __init__(self, detail: str = "", code: Optional[str] = None):
        if code is not None:
            self.code = code
        self.detail = detail
        super().__init__(f"{self.code}: {detail}")


class DimensionMismatchError(OracleRejectedError):
    code = ERROR_DIM_MISMATCH


class BadStageError(OracleRejectedError):
    code = ERROR_BAD_STAGE


class QueryParseError(OracleRejectedError):
    code = ERROR_PARSE


_REJECTIONS = {
    ERROR_DIM_MISMATCH: DimensionMismatchError,
    ERROR_BAD_STAGE: BadStageError,
    ERROR_PARSE: QueryParseError,
}


def rejection_for(code: str, detail: str) -> OracleRejectedError:
    cls = _REJECTIONS.get(code)
    if cls is None:
        return OracleRejectedError(detail, code=code)
    return cls(detail)


# ============================================================
# Validation data and loss
# ============================================================
@dataclass(frozen=True)
class ValidationSet:
    inputs: np.ndarray  # (n, k)
    labels: np.ndarray  # (n,) class indices

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise ValueError(
                f"validation inputs {inputs.shape} and labels {labels.shape} do not line up"
            )
        if inputs.shape[0] < 1:
            raise ValueError("validation set is empty")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(weights: Mapping[str, np.ndarray], val: ValidationSet) -> float:
    """
    Mean cross-entropy of softmax(sum_l W_l x) against the labels. Every layer maps the
    same input, so the per-layer weights are summed before the product.
    """
    total = None
    for w in weights.values():
        total = w if total is None else total + w
    if total is None:
        raise ValueError("no layers to evaluate")
    d = total.shape[0]
    if np.any(val.labels < 0) or np.any(val.labels >= d):
        raise ValueError(f"labels fall outside [0, {d})")
    with np.errstate(over="ignore", invalid="ignore"):
        logits = val.inputs @ total.T
        logp = log_softmax(logits)
        loss = float(-np.mean(logp[np.arange(val.n), val.labels]))
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"cross-entropy evaluated to {loss!r}")
    # rounding can leave a perfect fit a hair below zero
    return max(0.0, loss)


def adapter_loss(world: "SynthWorld", adapter: Optional[Mapping[str, lowrank.LowRankPair]]) -> float:
    """Loss of base + task_vector(adapter) per layer; None means the base model alone."""
    weights: Dict[str, np.ndarray] = {}
    for layer, base in world.base.items():
        if adapter is None:
            weights[layer] = base
        else:
            weights[layer] = base + lowrank.task_vector(adapter[layer])
    return cross_entropy_loss(weights, world.val)


def merge_for_query(repo: lowrank.AdapterRepository, query: FitnessQuery) -> lowrank.Adapter:
    """Stage 1: uniform pre-merge at the query's alphas. Stage 2: beta weights over frozen alphas."""
    if len(query.alphas) != repo.n:
        raise DimensionMismatchError(
            f"query carries {len(query.alphas)} alphas, repository holds {repo.n} adapters"
        )
    if query.stage == 1:
        return lowrank.premerge_uniform(repo, query.alphas)
    if query.stage == 2:
        if query.betas is None or len(query.betas) != repo.n:
            got = None if query.betas is None else len(query.betas)
            raise DimensionMismatchError(f"query carries {got} betas, repository holds {repo.n} adapters")
        return lowrank.merge(repo, query.betas, query.alphas)
    raise BadStageError(f"stage must be 1 or 2, got {query.stage}")


def evaluate_local(world: "SynthWorld", query: FitnessQuery) -> FitnessReply:
    """
    Loss of the merge the query describes. Raises an OracleRejectedError subclass for
    queries that do not fit the pool and NonFiniteLossError when the merged model
    overflows (e.g. huge betas).
    """
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            merged = merge_for_query(world.repo, query)
        except lowrank.NonFiniteError as e:
            raise NonFiniteLossError(f"merged adapter for request {query.request_id} overflowed: {e}") from e
        try:
            loss = adapter_loss(world, merged)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(f"loss for request {query.request_id} is not finite: {e.detail}") from e
    return FitnessReply(request_id=query.request_id, loss=loss, n_examples=world.val.n)


def world_info(world: "SynthWorld") -> WorldInfo:
    return WorldInfo(
        n_adapters=world.repo.n,
        layer_names=list(world.repo.layer_names),
        n_examples=world.val.n,
    )


# ============================================================
# Wire encoding
# ============================================================
def format_loss(loss: float) -> str:
    """17 significant digits, enough to round-trip any double."""
    return format(float(loss), ".17g")


def encode_reply(reply: FitnessReply) -> str:
    return (
        "{"
        f"\"request_id\": {json.dumps(reply.request_id)}, "
        f"\"loss\": {format_loss(reply.loss)}, "
        f"\"n_examples\": {int(reply.n_examples)}"
        "}"
    )


def encode_query(query: FitnessQuery) -> str:
    return json.dumps(
        {
            "request_id": query.request_id,
            "stage": query.stage,
            "alphas": [float(a) for a in query.alphas],
            "betas": None if query.betas is None else [float(b) for b in query.betas],
        },
        allow_nan=False,
    )


def decode_reply(status_code: int, text: str, request_id: str) -> FitnessReply:
    try:
        data = json.loads(text)
    except ValueError as e:
        raise MalformedReplyError(f"reply is not valid JSON (HTTP {status_code}): {e}") from e
    if not isinstance(data, dict):
        raise MalformedReplyError(f"reply is a JSON {type(data).__name__}, expected an object")

    if status_code == 400:
        try:
            err = ErrorReply.model_validate(data)
        except ValidationError as e:
            raise MalformedReplyError(f"unrecognised error reply: {data}") from e
        if err.error == ERROR_NON_FINITE:
            raise NonFiniteLossError(err.detail)
        raise rejection_for(err.error, err.detail)
    if status_code != 200:
        raise OracleTransportError(f"unexpected HTTP status {status_code}: {text[:200]}")

    loss = data.get("loss")
    if isinstance(loss, float) and not math.isfinite(loss):
        raise NonFiniteLossError(f"server returned non-finite loss {loss!r}")
    if data.get("request_id") != request_id:
        raise RequestIdMismatchError(
            f"sent request_id {request_id!r}, reply carries {data.get('request_id')!r}"
        )
    try:
        return FitnessReply.model_validate(data)
    except ValidationError as e:
        raise MalformedReplyError(f"reply failed validation: {e.errors()[0].get('msg', e)}") from e


def evaluate_remote(
    endpoint: str,
    query: FitnessQuery,
    session: Optional[requests.Session] = None,
    timeout: float = 30.0,
) -> FitnessReply:
    url = endpoint.rstrip("/") + "/fitness"
    http = session or requests
    try:
        resp = http.post(
            url,
            data=encode_query(query).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            timeout=timeout,
        )
    except requests.RequestException as e:
        raise OracleTransportError(f"POST {url} failed: {e}") from e
    return decode_reply(resp.status_code, resp.text, query.request_id)


# ============================================================
# Oracle objects used by the pipeline
# ============================================================
class LocalOracle:
    """In-process evaluation over a synthetic world."""

    def __init__(self, world: "SynthWorld"):
        self.world = world

    @property
    def n_adapters(self) -> int:
        return self.world.repo.n

    @property
    def n_examples(self) -> int:
        return self.world.val.n

    @property
    def repo(self) -> Optional[lowrank.AdapterRepository]:
        return self.world.repo

    def evaluate(self, query: FitnessQuery) -> FitnessReply:
        return evaluate_local(self.world, query)

    def close(self) -> None:
        pass


class RemoteOracle:
    """
    Client for a fitness server. One requests.Session per oracle; the session's
    connection pool is sized for a full population of concurrent queries.
    """

    def __init__(
        self,
        endpoint: str,
        timeout_s: float = 30.0,
        repo: Optional[lowrank.AdapterRepository] = None,
        pool_size: int = 32,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self._repo = repo
        self._info: Optional[WorldInfo] = None
        self.session = requests.Session()
        adapter = HTTPAdapter(pool_connections=pool_size, pool_maxsize=pool_size)
        self.session.mount("http://", adapter)
        self.session.mount("https://", adapter)

    def info(self) -> WorldInfo:
        if self._info is None:
            url = f"{self.endpoint}/api/world-info"
            try:
                resp = self.session.get(url, timeout=self.timeout_s)
                resp.raise_for_status()
                self._info = WorldInfo.model_validate(resp.json())
            except requests.RequestException as e:
                raise OracleTransportError(f"GET {url} failed: {e}") from e
            except (ValueError, ValidationError) as e:
                raise MalformedReplyError(f"world-info reply is malformed: {e}") from e
            logger.info(
                f"Remote world at {self.endpoint}: {self._info.n_adapters} adapters, "
                f"{self._info.n_examples} validation examples"
            )
        return self._info

    @property
    def n_adapters(self) -> int:
        return self.info().n_adapters

    @property
    def n_examples(self) -> int:
        return self.info().n_examples

    @property
    def repo(self) -> Optional[lowrank.AdapterRepository]:
        return self._repo

    def evaluate(self, query: FitnessQuery) -> FitnessReply:
        return evaluate_remote(self.endpoint, query, session=self.session, timeout=self.timeout_s)

    def close(self) -> None:
        self.session.close()
