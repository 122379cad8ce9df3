import json
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests

import lowrank
import oracle
import synth
from app import create_app, start_background_server
from models import FitnessQuery, FitnessReply, SynthSpec


def stage2(world, betas, alphas=None, request_id="q"):
    n = world.repo.n
    return FitnessQuery(
        request_id=request_id,
        stage=2,
        alphas=list(alphas) if alphas is not None else [1.0] * n,
        betas=list(betas),
    )


@pytest.fixture(scope="module")
def world():
    return synth.generate_world(
        SynthSpec(input_dim=8, class_count=4, rank=2, n_adapters=5, n_relevant=2, n_val=64, seed=21)
    )


@pytest.fixture(scope="module")
def server(world):
    with start_background_server(world) as handle:
        yield handle


@pytest.fixture
def client(world):
    return create_app(world).test_client()


class TestCrossEntropy:
    def test_uniform_logits_give_log_classes(self):
        val = oracle.ValidationSet(inputs=np.ones((4, 3)), labels=[0, 1, 2, 3])
        loss = oracle.cross_entropy_loss({"l": np.zeros((4, 3))}, val)
        assert loss == pytest.approx(math.log(4), rel=1e-12)

    def test_layers_are_summed(self, rng):
        val = oracle.ValidationSet(inputs=rng.standard_normal((10, 3)), labels=rng.integers(0, 4, 10))
        w1, w2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        split = oracle.cross_entropy_loss({"a": w1, "b": w2}, val)
        joined = oracle.cross_entropy_loss({"a": w1 + w2}, val)
        assert split == pytest.approx(joined, rel=1e-12)

    def test_large_logits_stay_finite(self):
        val = oracle.ValidationSet(inputs=np.ones((2, 1)), labels=[0, 1])
        loss = oracle.cross_entropy_loss({"l": np.array([[1e4], [-1e4]])}, val)
        assert math.isfinite(loss)
        assert loss == pytest.approx(1e4, rel=1e-9)

    def test_non_finite_loss_is_raised_not_clamped(self):
        val = oracle.ValidationSet(inputs=np.array([[1.0, -1.0]]), labels=[0])
        with pytest.raises(oracle.NonFiniteLossError):
            oracle.cross_entropy_loss({"l": np.full((3, 2), np.inf)}, val)

    def test_label_out_of_range(self):
        val = oracle.ValidationSet(inputs=np.ones((1, 2)), labels=[5])
        with pytest.raises(ValueError):
            oracle.cross_entropy_loss({"l": np.zeros((3, 2))}, val)

    def test_finite_difference_matches_analytic_gradient(self, rng):
        n, d, k = 40, 5, 6
        val = oracle.ValidationSet(inputs=rng.standard_normal((n, k)), labels=rng.integers(0, d, n))
        w = rng.standard_normal((d, k)) * 0.5
        probs = np.exp(oracle.log_softmax(val.inputs @ w.T))
        probs[np.arange(n), val.labels] -= 1.0
        grad = probs.T @ val.inputs / n
        i, j = np.unravel_index(np.argmax(np.abs(grad)), grad.shape)
        h = 1e-5
        plus, minus = w.copy(), w.copy()
        plus[i, j] += h
        minus[i, j] -= h
        numeric = (oracle.cross_entropy_loss({"l": plus}, val) - oracle.cross_entropy_loss({"l": minus}, val)) / (2 * h)
        assert numeric == pytest.approx(grad[i, j], rel=1e-5)


class TestLocalEvaluation:
    def test_zero_betas_give_base_loss(self, world):
        reply = oracle.evaluate_local(world, stage2(world, [0.0] * world.repo.n))
        assert reply.loss == synth.zero_delta_loss(world)
        assert reply.n_examples == 64

    def test_recovering_the_target_gives_teacher_loss(self):
        world = synth.generate_world(
            SynthSpec(input_dim=8, class_count=4, rank=2, n_adapters=3, n_relevant=1, noise_level=0.0, seed=2)
        )
        reply = oracle.evaluate_local(world, stage2(world, [1.0, 0.0, 0.0]))
        assert reply.loss == pytest.approx(world.teacher_loss, rel=1e-12)

    def test_identical_queries_identical_replies(self, world):
        query = stage2(world, [0.3, -0.2, 0.1, 0.0, 0.5], alphas=[0.5, 1.0, 0.2, 0.9, 0.4])
        a = oracle.encode_reply(oracle.evaluate_local(world, query))
        b = oracle.encode_reply(oracle.evaluate_local(world, query))
        assert a == b

    def test_stage1_is_uniform_premerge(self, world):
        alphas = [0.5, 1.0, 0.2, 0.9, 0.4]
        query = FitnessQuery(request_id="s1", stage=1, alphas=alphas)
        expected = oracle.adapter_loss(world, lowrank.premerge_uniform(world.repo, alphas))
        assert oracle.evaluate_local(world, query).loss == expected

    def test_wrong_pool_size(self, world):
        with pytest.raises(oracle.DimensionMismatchError):
            oracle.evaluate_local(world, FitnessQuery(request_id="x", stage=1, alphas=[1.0, 1.0]))

    @pytest.mark.parametrize("beta", [1e200, 1e308])
    def test_overflowing_merge_is_non_finite(self, world, beta):
        with pytest.raises(oracle.NonFiniteLossError):
            oracle.evaluate_local(world, stage2(world, [beta] * world.repo.n))

    def test_betas_longer_than_pool(self, world):
        query = FitnessQuery(request_id="b", stage=2, alphas=[1.0] * 5, betas=[0.1] * 6)
        with pytest.raises(oracle.DimensionMismatchError):
            oracle.evaluate_local(world, query)

    def test_near_uniform_predictions_cost_log_classes(self):
        world = synth.generate_world(SynthSpec(class_count=8, base_scale=0.01, seed=4))
        assert synth.zero_delta_loss(world) == pytest.approx(math.log(8), rel=0.1)


class TestWireCodec:
    def test_reply_carries_seventeen_digits(self):
        body = oracle.encode_reply(FitnessReply(request_id="r", loss=0.1, n_examples=5))
        assert body == '{"request_id": "r", "loss": 0.10000000000000001, "n_examples": 5}'
        assert json.loads(body)["loss"] == 0.1

    def test_query_rejects_nan_on_encode(self):
        query = FitnessQuery.model_construct(request_id="r", stage=1, alphas=[float("nan")], betas=None)
        with pytest.raises(ValueError):
            oracle.encode_query(query)

    def test_decode_success(self):
        reply = oracle.decode_reply(200, '{"request_id": "a", "loss": 1.5, "n_examples": 3}', "a")
        assert reply.loss == 1.5

    @pytest.mark.parametrize(
        "status, text, error",
        [
            (200, "not json", oracle.MalformedReplyError),
            (200, "[1, 2]", oracle.MalformedReplyError),
            (200, '{"request_id": "b", "loss": 1.0, "n_examples": 3}', oracle.RequestIdMismatchError),
            (200, '{"request_id": "a", "loss": NaN, "n_examples": 3}', oracle.NonFiniteLossError),
            (200, '{"request_id": "a", "loss": 1.0}', oracle.MalformedReplyError),
            (200, '{"request_id": "a", "loss": -1.0, "n_examples": 3}', oracle.MalformedReplyError),
            (500, '{"message": "boom"}', oracle.OracleTransportError),
            (400, '{"error": "dim_mismatch", "detail": "n"}', oracle.DimensionMismatchError),
            (400, '{"error": "bad_stage", "detail": "s"}', oracle.BadStageError),
            (400, '{"error": "parse_error", "detail": "p"}', oracle.QueryParseError),
            (400, '{"error": "non_finite_loss", "detail": "f"}', oracle.NonFiniteLossError),
            (400, '{"error": "other", "detail": "?"}', oracle.MalformedReplyError),
        ],
    )
    def test_decode_failures(self, status, text, error):
        with pytest.raises(error):
            oracle.decode_reply(status, text, "a")


class TestFitnessRoutes:
    def post(self, client, payload):
        body = payload if isinstance(payload, (str, bytes)) else json.dumps(payload)
        return client.post("/fitness", data=body, content_type="application/json")

    def test_success(self, client, world):
        resp = self.post(client, {"request_id": "ok", "stage": 1, "alphas": [1.0] * 5, "betas": None})
        assert resp.status_code == 200
        data = resp.get_json()
        assert data["request_id"] == "ok"
        assert data["n_examples"] == world.val.n

    def test_dim_mismatch(self, client):
        resp = self.post(client, {"request_id": "d", "stage": 2, "alphas": [1.0] * 3, "betas": [0.1] * 3})
        assert resp.status_code == 400
        assert resp.get_json()["error"] == "dim_mismatch"

    @pytest.mark.parametrize(
        "alphas, betas",
        [([1.0] * 5, [0.1] * 4), ([1.0] * 3, [0.1] * 4), ([1.0] * 5, [0.1] * 6)],
    )
    def test_vector_lengths_against_pool_are_dim_mismatch(self, client, alphas, betas):
        resp = self.post(client, {"request_id": "len", "stage": 2, "alphas": alphas, "betas": betas})
        assert resp.status_code == 400
        assert resp.get_json()["error"] == "dim_mismatch"

    @pytest.mark.parametrize("beta", [1e200, 1e308])
    def test_overflowing_merge_gets_structured_error(self, client, beta):
        resp = self.post(client, {"request_id": "big", "stage": 2, "alphas": [1.0] * 5, "betas": [beta] * 5})
        assert resp.status_code == 400
        data = resp.get_json()
        assert data["error"] == "non_finite_loss"
        assert data["detail"]

    @pytest.mark.parametrize("stage", [0, 3, "1", True, None])
    def test_bad_stage(self, client, stage):
        resp = self.post(client, {"request_id": "s", "stage": stage, "alphas": [1.0] * 5})
        assert resp.status_code == 400
        assert resp.get_json()["error"] == "bad_stage"

    @pytest.mark.parametrize(
        "body",
        [
            "{not json",
            "[1, 2, 3]",
            '{"request_id": "n", "stage": 1, "alphas": [NaN, 1, 1, 1, 1], "betas": null}',
            '{"request_id": "n", "stage": 1, "alphas": [1, 1, 1, 1, Infinity], "betas": null}',
            {"request_id": "n", "alphas": [1.0] * 5},
            {"request_id": "", "stage": 1, "alphas": [1.0] * 5},
            {"request_id": "n", "stage": 1, "alphas": [1.5] * 5},
            {"request_id": "n", "stage": 2, "alphas": [1.0] * 5, "betas": None},
            {"request_id": "n", "stage": 1, "alphas": [1.0] * 5, "betas": [1.0] * 5},
        ],
    )
    def test_parse_error(self, client, body):
        resp = self.post(client, body)
        assert resp.status_code == 400
        data = resp.get_json()
        assert data["error"] == "parse_error"
        assert data["detail"]

    def test_duplicate_request_id_is_idempotent(self, client):
        payload = {"request_id": "dup", "stage": 2, "alphas": [1.0] * 5, "betas": [0.2] * 5}
        first = self.post(client, payload)
        second = self.post(client, payload)
        assert first.data == second.data

    def test_world_info_exposes_no_parameters(self, client):
        data = client.get("/api/world-info").get_json()
        assert data == {"n_adapters": 5, "layer_names": ["layer0"], "n_examples": 64}

    def test_health(self, client):
        assert client.get("/api/health").get_json() == {"status": "ok"}


class TestRemoteOracle:
    def test_matches_local(self, server, world):
        remote = oracle.RemoteOracle(server.url)
        try:
            assert remote.n_adapters == world.repo.n
            query = stage2(world, [0.4, -0.3, 0.2, 0.1, 0.0], alphas=[0.7, 0.3, 1.0, 0.5, 0.2])
            local = oracle.evaluate_local(world, query).loss
            assert remote.evaluate(query).loss == pytest.approx(local, rel=1e-12)
        finally:
            remote.close()

    def test_concurrent_population_matches_sequential(self, server, world):
        rng = np.random.default_rng(0)
        queries = [
            stage2(world, rng.uniform(-1.5, 1.5, 5), alphas=rng.uniform(0, 1, 5), request_id=f"c{i}")
            for i in range(20)
        ]
        sequential = [oracle.evaluate_local(world, q).loss for q in queries]
        remote = oracle.RemoteOracle(server.url)
        try:
            with ThreadPoolExecutor(max_workers=20) as pool:
                replies = list(pool.map(remote.evaluate, queries))
        finally:
            remote.close()
        assert [r.request_id for r in replies] == [q.request_id for q in queries]
        for reply, expected in zip(replies, sequential):
            assert reply.loss == pytest.approx(expected, rel=1e-12)

    def test_two_hundred_random_queries_in_concurrent_batches(self, server, world):
        rng = np.random.default_rng(7)
        n = world.repo.n
        queries = []
        for i in range(200):
            alphas = rng.uniform(0.0, 1.0, n)
            if i % 2:
                queries.append(stage2(world, rng.uniform(-1.5, 1.5, n), alphas=alphas, request_id=f"r{i}"))
            else:
                queries.append(FitnessQuery(request_id=f"r{i}", stage=1, alphas=alphas.tolist()))
        expected = [oracle.evaluate_local(world, q).loss for q in queries]
        remote = oracle.RemoteOracle(server.url)
        replies = []
        try:
            with ThreadPoolExecutor(max_workers=20) as pool:
                for start in range(0, 200, 20):
                    replies.extend(pool.map(remote.evaluate, queries[start:start + 20]))
        finally:
            remote.close()
        assert len(replies) == 200
        for query, reply, loss in zip(queries, replies, expected):
            assert reply.request_id == query.request_id
            assert reply.loss == pytest.approx(loss, rel=1e-12)

    def test_non_finite_loss_surfaces_as_typed_error(self, server, world):
        remote = oracle.RemoteOracle(server.url)
        try:
            with pytest.raises(oracle.NonFiniteLossError):
                remote.evaluate(stage2(world, [1e200] * world.repo.n, request_id="inf"))
        finally:
            remote.close()

    def test_rejection_surfaces_as_typed_error(self, server):
        remote = oracle.RemoteOracle(server.url)
        try:
            with pytest.raises(oracle.DimensionMismatchError):
                remote.evaluate(FitnessQuery(request_id="m", stage=1, alphas=[1.0, 1.0]))
        finally:
            remote.close()

    def test_malformed_body_keeps_connection_usable(self, server, world):
        session = requests.Session()
        try:
            bad = session.post(f"{server.url}/fitness", data=b"\xff\xfe garbage", timeout=10)
            assert bad.status_code == 400
            assert bad.json()["error"] == "parse_error"
            reply = oracle.evaluate_remote(server.url, stage2(world, [0.0] * 5), session=session)
            assert reply.loss == pytest.approx(synth.zero_delta_loss(world), rel=1e-12)
        finally:
            session.close()

    def test_unreachable_endpoint(self):
        remote = oracle.RemoteOracle("http://127.0.0.1:9", timeout_s=2)
        try:
            with pytest.raises(oracle.OracleTransportError):
                remote.evaluate(FitnessQuery(request_id="u", stage=1, alphas=[1.0]))
        finally:
            remote.close()
