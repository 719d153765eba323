"""Session-oriented HTTP service: the live counterpart of the simulator.

A session holds an uploaded image, an append-only prompt history, and the
current prediction. State is always a pure function of (image, history,
segmenter): every mutation recomputes or extends the same replay, so undo is
exact and concurrent prompts on one session serialize cleanly.
"""
from __future__ import annotations

import base64
import binascii
import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from .. import storage
from ..interact import downsample_mask
from ..maskcore import BinaryMask, ImageGrid, dice
from ..proposer import (
    CandidateMask,
    ClassicalSegmenter,
    Prompt,
    PromptSet,
    Segmenter,
    UnsupportedPromptError,
)
from .schemas import (
    CreateSessionRequest,
    CreateSessionResponse,
    CsrMask,
    PredictionResponse,
    PromptModel,
    SessionState,
    from_prompt,
    to_prompt,
)

DEFAULT_SESSION_TTL = 30 * 60.0
DEFAULT_MAX_UPLOAD_BYTES = 32 * 1024 * 1024
DEFAULT_MAX_PIXELS = 4096 * 4096


class _SingleMaskOracle:
    """Dict-like text oracle that answers every category with one GT mask."""

    def __init__(self, mask: BinaryMask):
        self.mask = mask

    def __contains__(self, key: int) -> bool:
        return True

    def __getitem__(self, key: int) -> BinaryMask:
        return self.mask


def default_segmenter_factory(tolerance: float = 25.0) -> Callable[[BinaryMask | None], Segmenter]:
    def make(gt: BinaryMask | None) -> Segmenter:
        oracle = _SingleMaskOracle(gt) if gt is not None else None
        return ClassicalSegmenter(tolerance=tolerance, text_oracle=oracle)

    return make


@dataclass
class LiveSession:
    id: str
    image: ImageGrid
    segmenter: Segmenter
    gt: BinaryMask | None = None
    prompts: list[Prompt] = field(default_factory=list)
    prediction: BinaryMask | None = None
    confidence: float | None = None
    dice_trace: list[float] = field(default_factory=list)
    created_at: float = field(default_factory=time.time)
    last_touched: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _predict_prefix(self, history: list[Prompt]) -> tuple[BinaryMask | None, float | None, list[float]]:
        """Replay a prompt history from scratch, threading the low-res prior."""
        prediction: BinaryMask | None = None
        confidence: float | None = None
        trace: list[float] = []
        prior: BinaryMask | None = None
        for i in range(len(history)):
            candidates = self.segmenter.predict(
                self.image, PromptSet(tuple(history[: i + 1]), prior)
            )
            prediction = self._best(candidates)
            confidence = max((c.confidence for c in candidates), default=None)
            prior = downsample_mask(prediction)
            if self.gt is not None:
                trace.append(dice(prediction, self.gt))
        return prediction, confidence, trace

    def _best(self, candidates: list[CandidateMask]) -> BinaryMask:
        if not candidates:
            return BinaryMask.zeros(self.image.height, self.image.width)
        return max(candidates, key=lambda c: c.confidence).mask

    def add_prompt(self, prompt: Prompt) -> None:
        # validate before mutating so a rejected prompt leaves history intact
        PromptSet((prompt,)).validate_bounds(self.image.height, self.image.width)
        prior = downsample_mask(self.prediction) if self.prediction is not None else None
        candidates = self.segmenter.predict(
            self.image, PromptSet(tuple(self.prompts) + (prompt,), prior)
        )
        self.prompts.append(prompt)
        self.prediction = self._best(candidates)
        self.confidence = max((c.confidence for c in candidates), default=None)
        if self.gt is not None:
            self.dice_trace.append(dice(self.prediction, self.gt))
        self.last_touched = time.time()

    def undo(self) -> None:
        self.prompts.pop()
        self.prediction, self.confidence, self.dice_trace = self._predict_prefix(self.prompts)
        self.last_touched = time.time()

    def replay(self) -> BinaryMask | None:
        """Recompute the prediction from the stored history (pure replay)."""
        prediction, _, _ = self._predict_prefix(self.prompts)
        return prediction

    def prediction_response(self) -> PredictionResponse:
        return PredictionResponse(
            mask=CsrMask.from_mask(self.prediction) if self.prediction is not None else None,
            confidence=self.confidence,
            dice=self.dice_trace[-1] if self.dice_trace else None,
            round=len(self.prompts),
        )

    def state(self) -> SessionState:
        return SessionState(
            session_id=self.id,
            height=self.image.height,
            width=self.image.width,
            prompts=[from_prompt(p) for p in self.prompts],
            mask=CsrMask.from_mask(self.prediction) if self.prediction is not None else None,
            confidence=self.confidence,
            dice_trace=list(self.dice_trace),
            created_at=self.created_at,
            last_touched=self.last_touched,
        )


class SessionStore:
    def __init__(self, ttl: float = DEFAULT_SESSION_TTL, snapshot_dir: Path | None = None):
        self.ttl = ttl
        self.snapshot_dir = snapshot_dir
        self._sessions: dict[str, LiveSession] = {}
        self._lock = threading.Lock()
        if snapshot_dir is not None:
            snapshot_dir.mkdir(parents=True, exist_ok=True)

    def purge_expired(self) -> None:
        now = time.time()
        with self._lock:
            dead = [sid for sid, s in self._sessions.items() if s.last_touched + self.ttl < now]
            for sid in dead:
                del self._sessions[sid]
                self._drop_snapshot(sid)

    def put(self, session: LiveSession) -> None:
        with self._lock:
            self._sessions[session.id] = session

    def get(self, session_id: str) -> LiveSession:
        self.purge_expired()
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def delete(self, session_id: str) -> None:
        with self._lock:
            if session_id not in self._sessions:
                raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
            del self._sessions[session_id]
            self._drop_snapshot(session_id)

    def snapshot(self, session: LiveSession) -> None:
        if self.snapshot_dir is None:
            return
        buf = io.BytesIO()
        Image.fromarray(session.image.pixels).save(buf, format="PNG")
        doc = session.state().model_dump()
        doc["image_b64"] = base64.b64encode(buf.getvalue()).decode("ascii")
        doc["gt"] = CsrMask.from_mask(session.gt).model_dump() if session.gt is not None else None
        (self.snapshot_dir / f"{session.id}.json").write_text(
            json.dumps(doc, sort_keys=True), encoding="utf-8"
        )

    def _drop_snapshot(self, session_id: str) -> None:
        if self.snapshot_dir is not None:
            (self.snapshot_dir / f"{session_id}.json").unlink(missing_ok=True)


def _decode_upload(image_b64: str, max_bytes: int, max_pixels: int) -> ImageGrid:
    try:
        raw = base64.b64decode(image_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=400, detail=f"invalid base64 payload: {exc}") from exc
    if len(raw) > max_bytes:
        raise HTTPException(status_code=413, detail=f"upload exceeds {max_bytes} bytes")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            if im.width * im.height > max_pixels:
                raise HTTPException(status_code=413, detail=f"image exceeds {max_pixels} pixels")
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            return ImageGrid(np.asarray(im, dtype=np.uint8))
    except HTTPException:
        raise
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"undecodable image: {exc}") from exc


def create_app(
    data_dir: Path | None = None,
    frontend_dir: Path | None = None,
    segmenter_factory: Callable[[BinaryMask | None], Segmenter] | None = None,
    session_ttl: float = DEFAULT_SESSION_TTL,
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD_BYTES,
    max_pixels: int = DEFAULT_MAX_PIXELS,
    snapshot_dir: Path | None = None,
) -> FastAPI:
    app = FastAPI(title="imis session service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = SessionStore(ttl=session_ttl, snapshot_dir=snapshot_dir)
    factory = segmenter_factory or default_segmenter_factory()
    categories: dict[int, str] = {}
    if data_dir is not None and (data_dir / "manifest.json").exists():
        categories = storage.read_manifest(data_dir / "manifest.json").categories
    app.state.store = store

    @app.post("/sessions", response_model=CreateSessionResponse, status_code=201)
    def create_session(request: CreateSessionRequest):
        image = _decode_upload(request.image_b64, max_upload_bytes, max_pixels)
        gt = None
        if request.gt is not None:
            try:
                gt = request.gt.to_mask()
            except storage.ContainerFormatError as exc:
                raise HTTPException(status_code=422, detail=f"malformed gt payload: {exc}")
            if gt.shape != (image.height, image.width):
                raise HTTPException(status_code=422, detail="gt dimensions do not match image")
        session = LiveSession(
            id=uuid.uuid4().hex, image=image, segmenter=factory(gt), gt=gt
        )
        store.put(session)
        store.snapshot(session)
        return CreateSessionResponse(
            session_id=session.id, height=image.height, width=image.width
        )

    @app.post("/sessions/{session_id}/prompts", response_model=PredictionResponse)
    def add_prompt(session_id: str, prompt: PromptModel):
        session = store.get(session_id)
        with session.lock:
            if prompt.type == "text" and categories and prompt.category_id not in categories:
                raise HTTPException(status_code=422, detail=f"unknown category {prompt.category_id}")
            try:
                session.add_prompt(to_prompt(prompt))
            except UnsupportedPromptError as exc:
                raise HTTPException(status_code=501, detail=str(exc))
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            store.snapshot(session)
            return session.prediction_response()

    @app.post("/sessions/{session_id}/undo", response_model=PredictionResponse)
    def undo(session_id: str):
        session = store.get(session_id)
        with session.lock:
            if not session.prompts:
                raise HTTPException(status_code=409, detail="prompt history is empty")
            session.undo()
            store.snapshot(session)
            return session.prediction_response()

    @app.get("/sessions/{session_id}", response_model=SessionState)
    def get_state(session_id: str):
        session = store.get(session_id)
        with session.lock:
            return session.state()

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str):
        store.delete(session_id)
        return Response(status_code=204)

    @app.get("/categories")
    def get_categories():
        return {str(cid): name for cid, name in sorted(categories.items())}

    if frontend_dir is not None and frontend_dir.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
