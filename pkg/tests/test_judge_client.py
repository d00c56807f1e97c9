import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from vfxdiff.judge_client import JudgeQueryError, encode_query, make_remote_judge, mask_rle, remote_judge_query
from vfxdiff.metrics import eor
from vfxdiff.synthvfx import EffectKind


class _StubJudge:
    """In-process HTTP server with a scripted list of behaviors per request:
    'yes', 'no', 'garbage', or 'hang'."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                outer.requests.append(json.loads(body))
                action = outer.script.pop(0) if outer.script else "yes"
                if action == "hang":
                    return  # close without replying -> client sees a protocol error
                if action == "garbage":
                    payload = b"not json at all"
                else:
                    payload = json.dumps({"answer": action}).encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_port}/judge"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def sample():
    video = np.random.default_rng(0).random((2, 4, 4, 1))
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    return video, mask


def test_mask_rle_round_trip_structure():
    mask = np.array([[0, 0, 1], [1, 1, 0]])
    assert mask_rle(mask) == [2, 3, 1]
    assert mask_rle(np.ones((2, 2))) == [0, 4]
    assert mask_rle(np.zeros((1, 3))) == [3]


def test_query_body_structure(sample):
    video, mask = sample
    body = json.loads(encode_query(video, EffectKind.GROW, mask))
    assert body["effect"] == "grow"
    assert body["height"] == 4 and body["width"] == 4
    assert sum(body["mask_rle"]) == 16
    assert len(body["frames_b64"]) == 2


def test_stub_always_yes(sample):
    video, mask = sample
    stub = _StubJudge(["yes", "yes", "yes"])
    try:
        verdict = eor(video, EffectKind.FADE, mask, make_remote_judge(stub.url, timeout=5))
        assert verdict.answer is True
        assert verdict.votes == (True, True, True)
    finally:
        stub.close()


def test_stub_majority_yes_no_yes(sample):
    video, mask = sample
    stub = _StubJudge(["yes", "no", "yes"])
    try:
        verdict = eor(video, EffectKind.FADE, mask, make_remote_judge(stub.url, timeout=5))
        assert verdict.answer is True
        assert verdict.votes == (True, False, True)
    finally:
        stub.close()


def test_malformed_response_raises_without_retry(sample):
    video, mask = sample
    stub = _StubJudge(["garbage"])
    try:
        with pytest.raises(JudgeQueryError, match="malformed|failed"):
            remote_judge_query(stub.url, video, EffectKind.FADE, mask, timeout=5, retries=0)
    finally:
        stub.close()


def test_persistent_failure_marks_sample_unevaluable(sample):
    video, mask = sample
    stub = _StubJudge(["hang"] * 20)
    try:
        judge = make_remote_judge(stub.url, timeout=1, retries=2, backoff=0.01)
        verdict = eor(video, EffectKind.FADE, mask, judge)
        assert verdict.unevaluable
        assert verdict.votes == (None, None, None)
        # each vote retried: 3 votes x (1 + 2 retries) requests
        assert len(stub.requests) == 9
    finally:
        stub.close()


def test_unreachable_endpoint_is_an_errored_vote(sample):
    video, mask = sample
    judge = make_remote_judge("http://127.0.0.1:9/judge", timeout=0.2, retries=0, backoff=0.01)
    verdict = eor(video, EffectKind.FADE, mask, judge)
    assert verdict.unevaluable
