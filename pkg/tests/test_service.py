"""HTTP service: endpoints, validation codes, determinism, equivalence."""

import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from patchfill import imageio as IO
from patchfill import sampler as S
from patchfill import tensor as T
from patchfill import transformer as X
from patchfill import vqvae as V
from patchfill.service import app as service_app
from patchfill.service.sessions import SessionStore

from toydata import patch_mask, tiled_images


@pytest.fixture(scope="module")
def models():
    vq_cfg = V.PVQVAEConfig(patch_size=4, feature_dim=16, codebook_size=32,
                            codebook_size_masked=8, image_size=(16, 16))
    vq = V.PatchVQVAE(vq_cfg, T.rng(0))
    tr_cfg = X.TransformerConfig(depth=1, heads=4, grid=(4, 4), vocab=32,
                                 feature_dim=16, input_dim=16)
    tr = X.TokenTransformer(tr_cfg, T.rng(1))
    return vq, tr


@pytest.fixture()
def client(models):
    return TestClient(service_app.create_app(*models))


def png_b64(arr):
    return base64.b64encode(IO.image_to_png_bytes(arr)).decode()


def body(image, mask, k1=2, k2=4, n_samples=1, seed=0):
    return {
        "image": png_b64(image),
        "mask": png_b64(mask[..., 0]),
        "config": {"k1": k1, "k2": k2, "n_samples": n_samples, "seed": seed},
    }


@pytest.fixture()
def sample_inputs():
    img = tiled_images(1, 16, 4, seed=2, bank_size=8)[0]
    mask = patch_mask(16, 16, 4, T.rng(3), frac=0.5)
    return img, mask


def decode_png(b64):
    return IO.png_bytes_to_array(base64.b64decode(b64))


# ----------------------------------------------------------------------
# info endpoints
# ----------------------------------------------------------------------

def test_health(client):
    res = client.get("/v1/health")
    assert res.status_code == 200
    assert res.json() == {"status": "ok", "model_loaded": True}


def test_model_info(client, models):
    vq, tr = models
    res = client.get("/v1/model")
    assert res.status_code == 200
    assert res.json() == {
        "r": 4, "D": 16, "K": 32, "K_prime": 8,
        "grid": {"h": 4, "w": 4}, "with_conditions": False,
    }


# ----------------------------------------------------------------------
# session lifecycle
# ----------------------------------------------------------------------

def test_create_step_result_cycle(client, sample_inputs):
    img, mask = sample_inputs
    res = client.post("/v1/sessions", json=body(img, mask, k1=3))
    assert res.status_code == 200
    info = res.json()
    masked = info["masked_cells"]
    assert masked == int((mask[::4, ::4, 0] == 0).sum())
    assert info["iterations_expected"] == -(-masked // 3)
    assert info["grid"] == {"h": 4, "w": 4}

    sid = info["session_id"]
    remaining = masked
    iters = 0
    while True:
        step = client.post(f"/v1/sessions/{sid}/step")
        assert step.status_code == 200
        payload = step.json()
        iters += 1
        assert payload["iteration"] == iters
        assert len(payload["filled_cells"]) == min(3, remaining)
        remaining -= len(payload["filled_cells"])
        assert len(payload["previews"]) == 1
        if payload["complete"]:
            break
    assert iters == info["iterations_expected"]

    assert client.post(f"/v1/sessions/{sid}/step").status_code == 409

    result = client.get(f"/v1/sessions/{sid}/result")
    assert result.status_code == 200
    out = decode_png(result.json()["images"][0])
    keep = np.broadcast_to((mask > 0), (16, 16, 3))
    uploaded = np.round(img * 255).astype(np.uint8)
    assert np.array_equal(out[keep], uploaded[keep])

    assert client.delete(f"/v1/sessions/{sid}").status_code == 200
    assert client.get(f"/v1/sessions/{sid}/result").status_code == 404


def test_result_before_complete_409(client, sample_inputs):
    img, mask = sample_inputs
    sid = client.post("/v1/sessions", json=body(img, mask)).json()["session_id"]
    assert client.get(f"/v1/sessions/{sid}/result").status_code == 409


def test_unknown_session_404(client):
    assert client.post("/v1/sessions/nope/step").status_code == 404
    assert client.get("/v1/sessions/nope/result").status_code == 404
    assert client.delete("/v1/sessions/nope").status_code == 404


def test_empty_mask_completes_immediately(client, sample_inputs):
    img, _ = sample_inputs
    mask = np.ones((16, 16, 1), np.float32)
    res = client.post("/v1/sessions", json=body(img, mask))
    info = res.json()
    assert info["masked_cells"] == 0
    assert info["iterations_expected"] == 0
    assert info["complete"] is True
    result = client.get(f"/v1/sessions/{info['session_id']}/result")
    assert result.status_code == 200
    out = decode_png(result.json()["images"][0])
    assert np.array_equal(out, np.round(img * 255).astype(np.uint8))


def test_step_replay_deterministic(client, sample_inputs):
    img, mask = sample_inputs

    def run():
        sid = client.post("/v1/sessions", json=body(img, mask, k1=2, seed=11)).json()["session_id"]
        cells = []
        while True:
            payload = client.post(f"/v1/sessions/{sid}/step").json()
            cells.append([(c["i"], c["j"]) for c in payload["filled_cells"]])
            if payload["complete"]:
                break
        result = client.get(f"/v1/sessions/{sid}/result").json()
        return cells, result["images"], result["token_grids"]

    a, b = run(), run()
    assert a == b


def test_preview_paints_pending_white(client, sample_inputs):
    img, mask = sample_inputs
    res = client.post("/v1/sessions", json=body(img, mask, k1=1)).json()
    sid = res["session_id"]
    payload = client.post(f"/v1/sessions/{sid}/step").json()
    preview = decode_png(payload["previews"][0])
    filled = {(c["i"], c["j"]) for c in payload["filled_cells"]}
    cells_masked = np.argwhere(mask[::4, ::4, 0] == 0)
    pending = [tuple(c) for c in cells_masked if tuple(c) not in filled]
    assert pending, "expected some still-pending cells after one step"
    for (ci, cj) in pending:
        block = preview[ci * 4 : ci * 4 + 4, cj * 4 : cj * 4 + 4]
        hole = mask[ci * 4 : ci * 4 + 4, cj * 4 : cj * 4 + 4, 0] == 0
        assert np.all(block[hole] == 255)


# ----------------------------------------------------------------------
# one-shot
# ----------------------------------------------------------------------

def test_one_shot_equals_stepwise(client, sample_inputs):
    img, mask = sample_inputs
    payload = body(img, mask, k1=2, k2=3, n_samples=2, seed=21)
    one = client.post("/v1/inpaint", json=payload)
    assert one.status_code == 200

    sid = client.post("/v1/sessions", json=payload).json()["session_id"]
    while not client.post(f"/v1/sessions/{sid}/step").json()["complete"]:
        pass
    stepwise = client.get(f"/v1/sessions/{sid}/result").json()

    assert one.json()["images"] == stepwise["images"]
    assert one.json()["token_grids"] == stepwise["token_grids"]


# ----------------------------------------------------------------------
# validation
# ----------------------------------------------------------------------

def test_malformed_base64_400(client, sample_inputs):
    img, mask = sample_inputs
    payload = body(img, mask)
    payload["image"] = "@@not-base64@@"
    res = client.post("/v1/sessions", json=payload)
    assert res.status_code == 400
    assert "image" in res.json()["detail"]


def test_garbage_png_400(client, sample_inputs):
    img, mask = sample_inputs
    payload = body(img, mask)
    payload["mask"] = base64.b64encode(b"not a png at all").decode()
    res = client.post("/v1/sessions", json=payload)
    assert res.status_code == 400
    assert "mask" in res.json()["detail"]


def test_nonbinary_mask_422(client, sample_inputs):
    img, _ = sample_inputs
    gray = np.full((16, 16), 0.5, np.float32)
    payload = body(img, np.ones((16, 16, 1), np.float32))
    payload["mask"] = png_b64(gray)
    res = client.post("/v1/sessions", json=payload)
    assert res.status_code == 422
    assert "binary" in res.json()["detail"]


def test_wrong_size_400(client):
    img = tiled_images(1, 16, 4, seed=4, bank_size=8)[0]
    big = np.ones((32, 32, 3), np.float32) * 0.5
    payload = {
        "image": png_b64(big),
        "mask": png_b64(np.ones((32, 32), np.float32)),
        "config": {"k1": 2, "k2": 2, "n_samples": 1, "seed": 0},
    }
    res = client.post("/v1/sessions", json=payload)
    assert res.status_code == 400
    assert "size" in res.json()["detail"]


def test_oversized_payload_413(client, sample_inputs, monkeypatch):
    img, mask = sample_inputs
    monkeypatch.setattr(service_app, "MAX_FIELD_BYTES", 64)
    res = client.post("/v1/inpaint", json=body(img, mask))
    assert res.status_code == 413


def test_conditions_rejected_without_support(client, sample_inputs):
    img, mask = sample_inputs
    payload = body(img, mask)
    payload["semantic"] = png_b64(np.zeros((16, 16), np.float32))
    res = client.post("/v1/sessions", json=payload)
    assert res.status_code == 400
    assert "condition" in res.json()["detail"]


# ----------------------------------------------------------------------
# store expiry
# ----------------------------------------------------------------------

def test_session_store_expiry():
    now = [0.0]
    store = SessionStore(ttl=10.0, clock=lambda: now[0])
    s = store.create(samples=[], config=None, image=None, mask=None,
                     iterations_expected=0, masked_cells=0)
    assert store.get(s.id) is not None
    now[0] = 5.0
    assert store.get(s.id) is not None  # touch refreshes the idle clock
    now[0] = 14.0
    assert store.get(s.id) is not None  # 9s idle, still alive
    now[0] = 30.0
    assert store.get(s.id) is None  # 16s idle, expired
    assert store.count() == 0
