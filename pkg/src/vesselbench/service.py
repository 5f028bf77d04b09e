"""Session-oriented HTTP interface to a running training process.

A session owns one training run in a background thread.  When the run
queries annotations, the session flips to ``awaiting_annotations`` and the
pending batches (with image tiles, prediction overlays and superpixel
masks) become available over HTTP; submitting the last missing annotation
set flips it back to ``training``.  Session state persists after every
completed iteration, so a restarted server resumes mid-flight sessions
with an identical trajectory.
"""

from __future__ import annotations

import base64
import json
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .core import GrayImage, label_to_image, load_manifest, pgm_to_bytes
from .pipeline import load_bundle, prepare_derived
from .spl import RunOutcome, SplConfig, SuspendRequested, TrainingRun, config_from_json, config_to_json, report_bytes
from .suggest import (
    AnnotationRequest,
    AnnotationSet,
    Annotator,
    BadAnnotation,
    annotation_set_from_json,
    rle_encode,
)

PHASES = ("training", "awaiting_annotations", "converged", "suspended")


class WrongPhase(Exception):
    pass


class DuplicateSubmission(Exception):
    pass


class MismatchedAnnotation(Exception):
    pass


class InteractiveAnnotator(Annotator):
    """Blocks the run loop until every pending batch has an annotation."""

    def __init__(self, on_phase=None):
        self._cond = threading.Condition()
        self.pending: dict[str, AnnotationRequest] = {}
        self.resolved: dict[str, AnnotationSet] = {}
        self.waiting = False
        self.suspend_flag = False
        self.on_phase = on_phase or (lambda phase: None)

    def annotate_iteration(self, requests: list[AnnotationRequest]) -> list[AnnotationSet]:
        with self._cond:
            self.pending = {r.batch.image_id: r for r in requests}
            self.resolved = {}
            self.waiting = True
        self.on_phase("awaiting_annotations")
        try:
            with self._cond:
                while len(self.resolved) < len(self.pending):
                    if self.suspend_flag:
                        raise SuspendRequested()
                    self._cond.wait(timeout=0.2)
                out = [self.resolved[i] for i in self.pending]
        finally:
            with self._cond:
                self.pending = {}
                self.resolved = {}
                self.waiting = False
        self.on_phase("training")
        return out

    def submit(self, payload: dict) -> int:
        """Returns the number of batches still missing; raises on misuse."""
        with self._cond:
            if not self.waiting:
                raise WrongPhase("no annotations are being awaited")
            image_id = str(payload.get("image_id"))
            request = self.pending.get(image_id)
            if request is None:
                raise MismatchedAnnotation(f"no pending batch for image {image_id}")
            if image_id in self.resolved:
                raise DuplicateSubmission(f"annotations for {image_id} already submitted")
            annotation = annotation_set_from_json(payload, request.partition)
            got = tuple(sorted(i for i, _ in annotation.superpixels))
            want = tuple(sorted(request.batch.superpixel_ids))
            if got != want:
                raise MismatchedAnnotation(f"superpixels {got} do not match the queried batch {want}")
            self.resolved[image_id] = annotation
            remaining = len(self.pending) - len(self.resolved)
            self._cond.notify_all()
            return remaining

    def request_suspend(self) -> None:
        with self._cond:
            self.suspend_flag = True
            self._cond.notify_all()

    def pending_requests(self) -> list[AnnotationRequest]:
        with self._cond:
            if not self.waiting:
                return []
            return [self.pending[i] for i in self.pending if i not in self.resolved]


def _b64_pgm(image: GrayImage) -> str:
    return base64.b64encode(pgm_to_bytes(image)).decode("ascii")


class Session:
    def __init__(self, session_id: str, session_dir: Path, manifest_path: Path, derived_dir: Path,
                 cfg: SplConfig, seed: int):
        self.id = session_id
        self.dir = session_dir
        self.manifest_path = manifest_path
        self.derived_dir = derived_dir
        self.cfg = cfg
        self.seed = seed
        self.lock = threading.Lock()
        self.phase = "training"
        self.outcome: RunOutcome | None = None
        self.error: str | None = None
        self.annotator = InteractiveAnnotator(on_phase=self._on_phase)
        self.run: TrainingRun | None = None
        self.thread: threading.Thread | None = None

    # -- lifecycle -------------------------------------------------------

    def start(self) -> None:
        bundle = load_bundle(self.manifest_path, self.derived_dir)
        self.run = TrainingRun(bundle, self.cfg, self.annotator, self.seed, checkpoint_dir=self.dir / "checkpoint")
        self.annotator.suspend_flag = False
        self._set_phase("training")
        self.thread = threading.Thread(target=self._drive, name=f"session-{self.id}", daemon=True)
        self.thread.start()

    def _drive(self) -> None:
        try:
            outcome = self.run.run()
        except Exception as exc:  # surfaced via GET /sessions/{id}
            self.error = f"{type(exc).__name__}: {exc}"
            self._set_phase("suspended")
            self._persist_meta()
            return
        self.outcome = outcome
        if outcome.status == "suspended":
            self._set_phase("suspended")
        else:
            (self.dir / "report.json").write_bytes(report_bytes(outcome.report))
            self._set_phase("converged")
        self._persist_meta()

    def suspend(self) -> None:
        self.annotator.request_suspend()
        if self.run is not None:
            self.run.stop_requested = True

    def resume(self) -> None:
        if self.phase != "suspended":
            raise WrongPhase("session is not suspended")
        if self.thread is not None and self.thread.is_alive():
            raise WrongPhase("session thread still running")
        self.start()

    def _on_phase(self, phase: str) -> None:
        self._set_phase(phase)

    def _set_phase(self, phase: str) -> None:
        with self.lock:
            self.phase = phase
        self._persist_meta()

    # -- persistence -------------------------------------------------------

    def _persist_meta(self) -> None:
        meta = {
            "id": self.id,
            "manifest": str(self.manifest_path),
            "derived_dir": str(self.derived_dir),
            "seed": self.seed,
            "phase": self.phase,
            "config": config_to_json(self.cfg),
        }
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = self.dir / "session.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2))
        tmp.replace(self.dir / "session.json")

    @classmethod
    def from_disk(cls, session_dir: Path) -> "Session":
        meta = json.loads((session_dir / "session.json").read_text())
        session = cls(
            session_id=meta["id"],
            session_dir=session_dir,
            manifest_path=Path(meta["manifest"]),
            derived_dir=Path(meta["derived_dir"]),
            cfg=config_from_json(meta["config"]),
            seed=meta["seed"],
        )
        session.phase = meta["phase"]
        return session

    # -- views -------------------------------------------------------------

    def status(self) -> dict:
        state = self.run.state if self.run else None
        return {
            "id": self.id,
            "phase": self.phase,
            "mode": self.cfg.mode,
            "seed": self.seed,
            "iteration": state.iteration if state else None,
            "dice_history": list(state.dice_history) if state else [],
            "pending_batches": len(self.annotator.pending_requests()),
            "error": self.error,
        }

    def queries_payload(self) -> dict:
        requests = self.annotator.pending_requests()
        batches = []
        for req in requests:
            flat_masks = []
            for sp_id, value in zip(req.batch.superpixel_ids, req.batch.uncertainties):
                mask = (req.partition.assignment == sp_id).astype("uint8").ravel()
                flat_masks.append({
                    "id": int(sp_id),
                    "uncertainty": float(value),
                    "mask_rle": rle_encode(mask),
                })
            batches.append({
                "image_id": req.batch.image_id,
                "iteration": req.batch.iteration,
                "width": req.image.width,
                "height": req.image.height,
                "superpixels": flat_masks,
                "image_pgm": _b64_pgm(req.image),
                "prediction_pgm": _b64_pgm(label_to_image(req.prediction)),
            })
        return {"batches": batches}


class SessionManager:
    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.sessions_dir = self.data_dir / "sessions"
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()

    def load_existing(self, auto_resume: bool = True) -> None:
        if not self.sessions_dir.exists():
            return
        for session_dir in sorted(self.sessions_dir.iterdir()):
            meta_path = session_dir / "session.json"
            if not meta_path.exists():
                continue
            session = Session.from_disk(session_dir)
            self.sessions[session.id] = session
            if auto_resume and session.phase in ("training", "awaiting_annotations"):
                session.start()

    def create(self, payload: dict) -> Session:
        manifest_raw = payload.get("manifest")
        if not manifest_raw:
            raise ValueError("manifest is required")
        manifest_path = Path(manifest_raw)
        if not manifest_path.is_absolute():
            manifest_path = self.data_dir / manifest_path
        if not manifest_path.exists():
            raise ValueError(f"manifest not found: {manifest_path}")
        load_manifest(manifest_path)  # validates shape
        cfg = config_from_json(payload.get("config", {}))
        seed = int(payload.get("seed", 0))
        derived_raw = payload.get("derived_dir")
        derived_dir = Path(derived_raw) if derived_raw else manifest_path.parent / "derived"
        if not derived_dir.is_absolute():
            derived_dir = self.data_dir / derived_dir
        prepare_derived(manifest_path, derived_dir)
        session_id = uuid.uuid4().hex[:12]
        session = Session(session_id, self.sessions_dir / session_id, manifest_path, derived_dir, cfg, seed)
        with self.lock:
            self.sessions[session_id] = session
        session.start()
        return session

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(session_id)
        return session


def create_app(data_dir: str | Path, auto_resume: bool = True) -> FastAPI:
    manager = SessionManager(data_dir)
    manager.load_existing(auto_resume=auto_resume)
    app = FastAPI(title="vesselbench session service")
    app.state.manager = manager

    def _session(session_id: str) -> Session:
        try:
            return manager.get(session_id)
        except KeyError:
            raise HTTPException(404, f"no session {session_id}")

    @app.post("/sessions")
    def create_session(payload: dict):
        try:
            session = manager.create(payload)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(400, str(exc))
        return {"id": session.id}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session(session_id).status()

    @app.get("/sessions/{session_id}/queries")
    def get_queries(session_id: str):
        session = _session(session_id)
        if session.phase != "awaiting_annotations":
            raise HTTPException(409, f"phase is {session.phase}, not awaiting_annotations")
        return session.queries_payload()

    @app.post("/sessions/{session_id}/annotations")
    def post_annotations(session_id: str, payload: dict):
        session = _session(session_id)
        try:
            remaining = session.annotator.submit(payload)
        except WrongPhase as exc:
            raise HTTPException(409, str(exc))
        except DuplicateSubmission as exc:
            raise HTTPException(409, str(exc))
        except (MismatchedAnnotation, BadAnnotation, KeyError) as exc:
            raise HTTPException(422, str(exc))
        return {"remaining": remaining}

    @app.post("/sessions/{session_id}/suspend")
    def suspend_session(session_id: str):
        session = _session(session_id)
        session.suspend()
        return {"id": session.id, "phase": "suspending"}

    @app.post("/sessions/{session_id}/resume")
    def resume_session(session_id: str):
        session = _session(session_id)
        try:
            session.resume()
        except WrongPhase as exc:
            raise HTTPException(409, str(exc))
        return {"id": session.id, "phase": session.phase}

    @app.get("/sessions/{session_id}/report")
    def get_report(session_id: str):
        session = _session(session_id)
        report_path = session.dir / "report.json"
        if session.phase != "converged" or not report_path.exists():
            raise HTTPException(409, f"phase is {session.phase}; report available once converged")
        return json.loads(report_path.read_text())

    @app.get("/sessions/{session_id}/overlay/{image_id}")
    def get_overlay(session_id: str, image_id: str):
        session = _session(session_id)
        if session.run is None:
            raise HTTPException(409, "session not started")
        state = session.run.state
        img = state.images.get(image_id)
        if img is None:
            raise HTTPException(404, f"no training image {image_id}")
        return {
            "image_id": image_id,
            "labels_pgm": _b64_pgm(label_to_image(img.labels)),
            "image_pgm": _b64_pgm(img.image),
        }

    return app
