import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from vesselbench.core import load_manifest, load_ground_truth
from vesselbench.pipeline import load_bundle, prepare_derived
from vesselbench.segmodel import TrainHyper
from vesselbench.service import create_app
from vesselbench.spl import SplConfig, arspl_run, config_to_json, report_bytes
from vesselbench.suggest import OracleAnnotator, rle_decode, rle_encode
from vesselbench.synth import write_dataset

SEED = 424242


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc-data")
    manifest = write_dataset(root / "ds", 777, counts=(4, 2, 2), width=32, height=32, n_frames=8)
    prepare_derived(manifest, root / "ds" / "derived", target_superpixels=16)
    truths = {}
    m = load_manifest(manifest)
    for entry in m.train:
        truths[entry.sequence_dir] = load_ground_truth(manifest.parent, entry)
    return {"root": root, "manifest": manifest, "derived": root / "ds" / "derived", "truths": truths}


def tiny_config(**overrides):
    base = dict(
        hyper=TrainHyper(max_steps=25, batch=4, lr0=0.1, precision="f32"),
        baseline_steps=25,
        channel_widths=(4, 8, 16),
        mcdo_passes=4,
        n_b=1,
        max_alt_iters=2,
        stop_dice_increment=1e-9,
        inference_precision="f32",
    )
    base.update(overrides)
    return SplConfig(**base)


def wait_for_phase(client, session_id, phases, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get(f"/sessions/{session_id}").json()
        if status["phase"] in phases:
            return status
        if status.get("error"):
            raise AssertionError(f"session errored: {status['error']}")
        time.sleep(0.1)
    raise AssertionError(f"timed out waiting for {phases}, last status {status}")


def answer_all_queries(client, session_id, truths):
    """Scripted annotator: answers every pending batch from ground truth."""
    payload = client.get(f"/sessions/{session_id}/queries").json()
    for batch in payload["batches"]:
        truth_flat = truths[batch["image_id"]].labels.ravel()
        superpixels = []
        for sp in batch["superpixels"]:
            mask = rle_decode(sp["mask_rle"], batch["width"] * batch["height"])
            indices = np.flatnonzero(mask)
            superpixels.append({"id": sp["id"], "labels": rle_encode(truth_flat[indices])})
        body = {"image_id": batch["image_id"], "iteration": batch["iteration"], "superpixels": superpixels}
        response = client.post(f"/sessions/{session_id}/annotations", json=body)
        assert response.status_code == 200, response.text
    return payload


def drive_to_convergence(client, session_id, truths, max_rounds=30):
    for _ in range(max_rounds):
        status = wait_for_phase(client, session_id, ("awaiting_annotations", "converged"))
        if status["phase"] == "converged":
            return status
        answer_all_queries(client, session_id, truths)
    raise AssertionError("session never converged")


class TestLifecycle:
    def test_create_and_status(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            response = client.post("/sessions", json={
                "manifest": str(dataset["manifest"]),
                "seed": SEED,
                "config": config_to_json(tiny_config(mode="noar")),
            })
            assert response.status_code == 200
            session_id = response.json()["id"]
            status = client.get(f"/sessions/{session_id}").json()
            assert status["phase"] in ("training", "converged")
            assert status["mode"] == "noar"
            wait_for_phase(client, session_id, ("converged",))
            report = client.get(f"/sessions/{session_id}/report").json()
            assert report["mode"] == "noar" and report["iterations"] >= 1

    def test_bad_manifest_is_400(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            response = client.post("/sessions", json={"manifest": "nope/missing.json", "seed": 1})
            assert response.status_code == 400

    def test_unknown_session_is_404(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            assert client.get("/sessions/deadbeef").status_code == 404

    def test_two_sessions_are_independent(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            ids = set()
            for seed in (1, 2):
                response = client.post("/sessions", json={
                    "manifest": str(dataset["manifest"]),
                    "seed": seed,
                    "config": config_to_json(tiny_config(mode="ns")),
                })
                ids.add(response.json()["id"])
            assert len(ids) == 2
            for session_id in ids:
                wait_for_phase(client, session_id, ("converged",))


class TestAnnotationFlow:
    def test_queries_gated_by_phase(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            session_id = client.post("/sessions", json={
                "manifest": str(dataset["manifest"]),
                "seed": SEED,
                "config": config_to_json(tiny_config(mode="ns")),
            }).json()["id"]
            # ns never awaits annotations; queries are 409 while training/converged
            response = client.get(f"/sessions/{session_id}/queries")
            assert response.status_code == 409
            wait_for_phase(client, session_id, ("converged",))

    def test_full_annotation_cycle(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            session_id = client.post("/sessions", json={
                "manifest": str(dataset["manifest"]),
                "seed": SEED,
                "config": config_to_json(tiny_config()),
            }).json()["id"]
            status = wait_for_phase(client, session_id, ("awaiting_annotations",))
            payload = client.get(f"/sessions/{session_id}/queries").json()
            batches = payload["batches"]
            assert 1 <= len(batches) <= 4
            for batch in batches:
                assert len(batch["superpixels"]) <= 1  # n_b = 1
                assert batch["image_pgm"] and batch["prediction_pgm"]

            # bogus superpixel id -> 422
            bad = {"image_id": batches[0]["image_id"], "iteration": batches[0]["iteration"],
                   "superpixels": [{"id": 9999, "labels": [4]}]}
            assert client.post(f"/sessions/{session_id}/annotations", json=bad).status_code == 422

            answer_all_queries(client, session_id, dataset["truths"])

            # duplicate submission for an already-resolved batch -> 409
            first = batches[0]
            truth_flat = dataset["truths"][first["image_id"]].labels.ravel()
            mask = rle_decode(first["superpixels"][0]["mask_rle"], first["width"] * first["height"])
            indices = np.flatnonzero(mask)
            dup = {"image_id": first["image_id"], "iteration": first["iteration"],
                   "superpixels": [{"id": first["superpixels"][0]["id"],
                                    "labels": rle_encode(truth_flat[indices])}]}
            response = client.post(f"/sessions/{session_id}/annotations", json=dup)
            assert response.status_code in (409, 422)

            drive_to_convergence(client, session_id, dataset["truths"])
            report = client.get(f"/sessions/{session_id}/report").json()
            assert report["annotated_superpixels"] >= 1

    def test_queried_superpixels_not_previously_labeled(self, dataset):
        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            session_id = client.post("/sessions", json={
                "manifest": str(dataset["manifest"]),
                "seed": 7,
                "config": config_to_json(tiny_config(max_alt_iters=3)),
            }).json()["id"]
            seen: dict[str, set[int]] = {}
            for _ in range(10):
                status = wait_for_phase(client, session_id, ("awaiting_annotations", "converged"))
                if status["phase"] == "converged":
                    break
                payload = client.get(f"/sessions/{session_id}/queries").json()
                for batch in payload["batches"]:
                    ids = {sp["id"] for sp in batch["superpixels"]}
                    assert not ids & seen.setdefault(batch["image_id"], set())
                    seen[batch["image_id"]] |= ids
                answer_all_queries(client, session_id, dataset["truths"])


class TestTransparency:
    def test_http_session_matches_oracle_run_bit_for_bit(self, dataset):
        cfg = tiny_config(max_alt_iters=3)
        bundle = load_bundle(dataset["manifest"], dataset["derived"])
        oracle = OracleAnnotator({r.image_id: r.truth for r in bundle.train})
        outcome = arspl_run(bundle, cfg, oracle, seed=SEED)
        oracle_bytes = report_bytes(outcome.report)

        app = create_app(dataset["root"], auto_resume=False)
        with TestClient(app) as client:
            session_id = client.post("/sessions", json={
                "manifest": str(dataset["manifest"]),
                "seed": SEED,
                "config": config_to_json(cfg),
            }).json()["id"]
            drive_to_convergence(client, session_id, dataset["truths"])
            session = app.state.manager.get(session_id)
            http_bytes = (session.dir / "report.json").read_bytes()
        assert http_bytes == oracle_bytes

    def test_restart_resumes_identical_trajectory(self, dataset, tmp_path):
        cfg = tiny_config(mode="noar", max_alt_iters=3)
        bundle = load_bundle(dataset["manifest"], dataset["derived"])
        straight = arspl_run(bundle, cfg, None, seed=99)

        data_dir = tmp_path / "resume-data"
        app = create_app(data_dir, auto_resume=False)
        with TestClient(app) as client:
            session_id = client.post("/sessions", json={
                "manifest": str(dataset["manifest"]),
                "derived_dir": str(dataset["derived"]),
                "seed": 99,
                "config": config_to_json(cfg),
            }).json()["id"]
            # suspend as soon as possible; some iterations may already be done
            client.post(f"/sessions/{session_id}/suspend")
            wait_for_phase(client, session_id, ("suspended", "converged"))

        # simulated restart: fresh manager over the same data dir
        app2 = create_app(data_dir, auto_resume=False)
        with TestClient(app2) as client2:
            status = client2.get(f"/sessions/{session_id}").json()
            if status["phase"] == "suspended":
                assert client2.post(f"/sessions/{session_id}/resume").status_code == 200
            wait_for_phase(client2, session_id, ("converged",), timeout=180)
            report = client2.get(f"/sessions/{session_id}/report").json()
        assert tuple(report["dice_history"]) == straight.report.dice_history
        assert report["test_metrics"] == straight.report.test_metrics
