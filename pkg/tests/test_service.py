"""Session service endpoints: bodies, snapshots, and error codes."""

import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from icforge import agents as ag
from icforge import dataforge as df
from icforge.imageio import decode_png
from icforge.service import create_app


def stub_critic(reference, target, bbox_ref, bbox_tgt, tag, seed):
    out = target.copy()
    out[bbox_tgt.ymin:bbox_tgt.ymax, bbox_tgt.xmin:bbox_tgt.xmax] ^= 0xFF
    return out


@pytest.fixture()
def rig(tmp_path):
    data = tmp_path / "data"
    df.forge_dataset(data, n=2, seed=31)
    manifest = df.DatasetManifest.load(data / "manifest.jsonl")
    rec = manifest.records[0]
    store = ag.SessionStore(tmp_path / "sessions",
                            backend=ag.OracleAgentBackend(ncc_floor=-1.0),
                            critic_fn=stub_critic)
    client = TestClient(create_app(store))
    return client, data, rec


def b64_file(path) -> str:
    return base64.b64encode(path.read_bytes()).decode("ascii")


def make_session(client, data, rec, session_id="web1"):
    return client.post("/sessions", json={
        "image_ref": b64_file(data / rec.files["target"]),
        "image_tgt": b64_file(data / rec.files["degraded"]),
        "tag": rec.tag,
        "session_id": session_id,
    })


class TestCreateAndSnapshot:
    def test_create_returns_detect_review(self, rig):
        client, data, rec = rig
        resp = make_session(client, data, rec)
        assert resp.status_code == 201
        snap = resp.json()
        assert snap["state"] == "AwaitDetectReview"
        assert snap["pending_step"] == "detect"
        assert snap["question"] == \
            "Accept [Inconsistency Detector] result? (yes/no):"
        assert snap["bbox_tgt"] is not None
        assert snap["revision"] == 1

    def test_get_matches_post_snapshot(self, rig):
        client, data, rec = rig
        created = make_session(client, data, rec).json()
        fetched = client.get("/sessions/web1").json()
        assert fetched == created

    def test_listing(self, rig):
        client, data, rec = rig
        assert client.get("/sessions").json() == {"sessions": []}
        make_session(client, data, rec)
        assert client.get("/sessions").json() == {"sessions": ["web1"]}

    def test_bad_base64_rejected(self, rig):
        client, _, _ = rig
        resp = client.post("/sessions", json={"image_ref": "%%%",
                                              "image_tgt": "%%%"})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "VALIDATION"

    def test_non_png_rejected(self, rig):
        client, _, _ = rig
        blob = base64.b64encode(b"plain text").decode()
        resp = client.post("/sessions", json={"image_ref": blob,
                                              "image_tgt": blob})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "VALIDATION"


class TestDecisions:
    def test_accept_walk_to_done(self, rig):
        client, data, rec = rig
        snap = make_session(client, data, rec).json()
        for _ in range(3):
            resp = client.post("/sessions/web1/decision",
                               json={"verdict": "accept",
                                     "revision": snap["revision"]})
            assert resp.status_code == 200
            snap = resp.json()
        assert snap["state"] == "Done"
        assert snap["message"] == "Image restoration workflow completed!"
        assert "corrected" in snap["artifacts"]

    def test_reject_with_bbox_override(self, rig):
        client, data, rec = rig
        make_session(client, data, rec)
        resp = client.post("/sessions/web1/decision",
                           json={"verdict": "reject", "bbox": [2, 3, 11, 12]})
        snap = resp.json()
        assert snap["state"] == "AwaitDetectReview"
        assert snap["bbox_tgt"] == [2, 3, 11, 12]

    def test_stale_revision_conflicts(self, rig):
        client, data, rec = rig
        snap = make_session(client, data, rec).json()
        ok = client.post("/sessions/web1/decision",
                         json={"verdict": "reject",
                               "revision": snap["revision"]})
        assert ok.status_code == 200
        stale = client.post("/sessions/web1/decision",
                            json={"verdict": "accept",
                                  "revision": snap["revision"]})
        assert stale.status_code == 409
        assert stale.json()["error"]["code"] == "PROTOCOL"

    def test_decision_after_done_is_protocol_error(self, rig):
        client, data, rec = rig
        make_session(client, data, rec)
        for _ in range(3):
            client.post("/sessions/web1/decision", json={"verdict": "accept"})
        resp = client.post("/sessions/web1/decision", json={"verdict": "accept"})
        assert resp.status_code == 409
        assert resp.json()["error"]["code"] == "PROTOCOL"

    def test_invalid_verdict(self, rig):
        client, data, rec = rig
        make_session(client, data, rec)
        resp = client.post("/sessions/web1/decision", json={"verdict": "maybe"})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "VALIDATION"

    def test_invalid_bbox_coordinates(self, rig):
        client, data, rec = rig
        make_session(client, data, rec)
        resp = client.post("/sessions/web1/decision",
                           json={"verdict": "reject", "bbox": [5, 0, 2, 4]})
        assert resp.status_code == 400

    def test_unknown_session_404(self, rig):
        client, _, _ = rig
        resp = client.post("/sessions/ghost/decision", json={"verdict": "accept"})
        assert resp.status_code == 404
        assert resp.json()["error"]["code"] == "VALIDATION"


class TestArtifacts:
    def test_png_roundtrip(self, rig):
        client, data, rec = rig
        snap = make_session(client, data, rec).json()
        resp = client.get(snap["artifacts"]["tgt"])
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert decode_png(resp.content).shape == (32, 32, 3)
        box = snap["bbox_tgt"]
        crop_resp = client.get(snap["artifacts"]["crop_tgt"])
        arr = decode_png(crop_resp.content)
        assert arr.shape == (box[3] - box[1], box[2] - box[0], 3)

    def test_crop_matches_box_pixels(self, rig):
        client, data, rec = rig
        snap = make_session(client, data, rec).json()
        x0, y0, x1, y1 = snap["bbox_tgt"]
        full = decode_png(client.get(snap["artifacts"]["tgt"]).content)
        part = decode_png(client.get(snap["artifacts"]["crop_tgt"]).content)
        assert np.array_equal(part, full[y0:y1, x0:x1])

    def test_missing_artifact_404(self, rig):
        client, data, rec = rig
        make_session(client, data, rec)
        resp = client.get("/sessions/web1/artifacts/corrected")
        assert resp.status_code == 404
        resp = client.get("/sessions/web1/artifacts/banana")
        assert resp.status_code == 404
