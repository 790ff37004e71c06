"""HTTP surface: status codes, wire shapes, artifact side effects."""

import asyncio
import json

import httpx
import pytest

import peerwatch
from peerwatch.service import app


class _SyncASGIClient:
    """Drives the ASGI app synchronously; ASGITransport is async-only."""

    def _call(self, method, path, payload=None):
        async def go():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://testserver"
            ) as client:
                return await client.request(method, path, json=payload)

        return asyncio.run(go())

    def get(self, path):
        return self._call("GET", path)

    def post(self, path, json=None):
        return self._call("POST", path, json)


@pytest.fixture()
def client():
    return _SyncASGIClient()


def _body(config, out_dir, seed=None):
    payload = {"config": config.model_dump(mode="json"), "out_dir": str(out_dir)}
    if seed is not None:
        payload["seed"] = seed
    return payload


class TestInfoEndpoints:
    def test_health(self, client):
        r = client.get("/health")
        assert r.status_code == 200
        assert r.json() == {"status": "ok", "version": peerwatch.__version__}

    def test_presets_sorted_catalogue(self, client):
        r = client.get("/presets")
        assert r.status_code == 200
        rows = r.json()
        names = [row["name"] for row in rows]
        assert names == sorted(names)
        assert len(rows) == 7
        by_name = {row["name"]: row for row in rows}
        assert by_name["eclipse-net"]["attackers"] == 200
        assert by_name["eclipse-net"]["victims"] == 50
        assert by_name["discovery-poisoning"]["detector_mode"] == "categorical"
        assert by_name["covert"]["detector_mode"] == "numeric"


class TestStageEndpoints:
    def test_simulate_writes_artifacts(self, client, tiny_numeric_config, tmp_path):
        out = tmp_path / "run"
        r = client.post("/simulate", json=_body(tiny_numeric_config, out))
        assert r.status_code == 200
        body = r.json()
        assert body["stage"] == "simulate"
        assert body["summary"]["scenario"] == "eclipse-single-victim"
        assert (out / "traces.csv").exists()
        assert (out / "manifest.json").exists()

    def test_full_stage_sequence(self, client, tiny_numeric_config, tmp_path):
        out = tmp_path / "run"
        for stage in ("simulate", "prepare", "train", "detect", "evaluate"):
            r = client.post(f"/{stage}", json=_body(tiny_numeric_config, out))
            assert r.status_code == 200, f"{stage}: {r.text}"
        assert (out / "metrics.json").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["unit"] == "connection"

    def test_seed_override_applies_to_simulation(self, client, tiny_numeric_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        client.post("/simulate", json=_body(tiny_numeric_config, a))
        client.post("/simulate", json=_body(tiny_numeric_config, b, seed=123))
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["config"]["seed"] == 7
        assert mb["config"]["seed"] == 123
        assert ma["digests"] != mb["digests"]

    def test_detect_without_artifacts_is_404(self, client, tiny_numeric_config, tmp_path):
        r = client.post("/detect", json=_body(tiny_numeric_config, tmp_path / "nothing"))
        assert r.status_code == 404
        assert "missing artifact" in r.json()["detail"]

    def test_extra_field_is_422(self, client, tiny_numeric_config, tmp_path):
        payload = _body(tiny_numeric_config, tmp_path)
        payload["verbose"] = True
        assert client.post("/simulate", json=payload).status_code == 422

    def test_incoherent_config_is_422(self, client, tiny_numeric_config, tmp_path):
        payload = _body(tiny_numeric_config, tmp_path)
        payload["config"]["detector"] = {"mode": "categorical", "top_k": 5}
        assert client.post("/simulate", json=payload).status_code == 422


class TestRunExperiment:
    def test_inline_config(self, client, tiny_numeric_config, tmp_path):
        out = tmp_path / "run"
        r = client.post(
            "/experiments/run",
            json={"config": tiny_numeric_config.model_dump(mode="json"), "out_dir": str(out)},
        )
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["name"] == "tiny-eclipse"
        assert body["out_dir"] == str(out)
        assert set(body["stages"]) == {"simulate", "prepare", "train", "detect", "evaluate"}
        assert body["metrics"]["unit"] == "connection"
        assert isinstance(body["metrics"]["tp"], int)

    def test_unknown_preset_is_400(self, client, tmp_path):
        r = client.post("/experiments/run", json={"preset": "nope", "out_dir": str(tmp_path)})
        assert r.status_code == 400
        assert "unknown preset" in r.json()["detail"]
        assert "eclipse-single" in r.json()["detail"]

    def test_preset_and_config_together_is_422(self, client, tiny_numeric_config, tmp_path):
        r = client.post(
            "/experiments/run",
            json={
                "preset": "covert",
                "config": tiny_numeric_config.model_dump(mode="json"),
                "out_dir": str(tmp_path),
            },
        )
        assert r.status_code == 422

    def test_neither_preset_nor_config_is_422(self, client, tmp_path):
        r = client.post("/experiments/run", json={"out_dir": str(tmp_path)})
        assert r.status_code == 422
