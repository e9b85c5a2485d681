"""HTTP review service: upload studies, fetch interpretations with a
steerable annotation threshold, inspect heatmaps, edit and finalize drafts.

Classifier scores are computed once per study and cached; a threshold
re-query reuses them and only runs localization and generation for
diseases that were not annotated before. Responses for a given
(study, threshold) are cached whole, so repeated reads are byte-identical.
"""

from __future__ import annotations

import io
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Header, HTTPException, Query, UploadFile
from fastapi.responses import FileResponse
from PIL import Image

from .. import __version__
from ..config import provenance_block
from ..localization import render_overlay, save_heatmap
from ..pipeline import InterpretConfig, assemble_from_parts, disease_finding, load_bundle
from .schemas import (
    HealthModel,
    InterpretationModel,
    ReportEdit,
    SessionModel,
    StudyCreated,
)
from .storage import ReviewStore, SessionFinalized, StudyNotFound, VersionConflict


@dataclass
class ServiceSettings:
    models_dir: str | Path
    storage_dir: str | Path = "./storage"
    default_threshold: float = 0.8
    max_upload_bytes: int = 5 * 1024 * 1024
    eager_interpretation: bool = True
    mode: str = "greedy"
    seed: int = 0


class CachingInterpreter:
    """Per-study artifact cache over the model bundle."""

    def __init__(self, bundle, store: ReviewStore, settings: ServiceSettings):
        self.bundle = bundle
        self.store = store
        self.settings = settings
        self._model_lock = threading.Lock()

    def config(self, threshold: float) -> InterpretConfig:
        return InterpretConfig(
            threshold=threshold, mode=self.settings.mode, seed=self.settings.seed
        )

    def _image(self, study_id: str) -> np.ndarray:
        with Image.open(self.store.image_path(study_id)) as img:
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0

    def probabilities(self, study_id: str) -> dict[str, float]:
        cached = self.store.read_cache(study_id, "scores.json")
        if cached is not None:
            return cached["probabilities"]
        with self._model_lock:
            output = self.bundle.score(self._image(study_id))
        doc = {
            "probabilities": {
                name: float(g) for name, g in zip(self.bundle.diseases, output.probabilities)
            },
            "logits": [float(z) for z in output.logits],
        }
        self.store.write_cache(study_id, "scores.json", doc)
        return doc["probabilities"]

    def finding(self, study_id: str, disease: str, probability: float, role: str, shared: bool) -> dict:
        name = f"findings/{disease}.json"
        cached = self.store.read_cache(study_id, name)
        if cached is not None:
            return cached
        image = self._image(study_id)
        config = self.config(self.settings.default_threshold)
        with self._model_lock:
            finding = disease_finding(self.bundle, image, disease, probability, role, config, shared)
        study_dir = self.store.study_dir(study_id)
        (study_dir / "findings").mkdir(parents=True, exist_ok=True)
        overlay = render_overlay(image, finding.heatmap, finding.bbox)
        overlay.save(study_dir / "findings" / f"{disease}_overlay.png")
        raw = Image.fromarray((np.clip(finding.heatmap, 0, 1) * 255).astype(np.uint8), mode="L")
        raw.save(study_dir / "findings" / f"{disease}_raw.png")
        save_heatmap(study_dir / "findings" / f"{disease}.npy", finding.heatmap)
        crop = np.clip(np.asarray(finding.crop, dtype=np.float64), 0, 1)
        Image.fromarray((crop * 255).astype(np.uint8), mode="L").save(
            study_dir / "findings" / f"{disease}_crop.png"
        )
        doc = finding.to_dict()
        self.store.write_cache(study_id, name, doc)
        return doc

    def normality_sentences(self, study_id: str, role: str) -> list[list[str]]:
        name = f"normality_{role}.json"
        cached = self.store.read_cache(study_id, name)
        if cached is not None:
            return cached["sentences"]
        image = self._image(study_id)
        config = self.config(self.settings.default_threshold)
        with self._model_lock:
            sentences = self.bundle.sentences(role, image, config)
        self.store.write_cache(study_id, name, {"role": role, "sentences": sentences})
        return sentences

    def interpretation(self, study_id: str, threshold: float) -> dict:
        self.store.require_study(study_id)
        cache_name = f"interp_{threshold}.json"
        cached = self.store.read_cache(study_id, cache_name)
        if cached is not None:
            return cached

        probabilities = self.probabilities(study_id)
        present = sorted(
            (d for d, g in probabilities.items() if g > threshold),
            key=lambda d: -probabilities[d],
        )
        selection = self.bundle.select(present)
        findings = []
        for disease in present:
            doc = dict(
                self.finding(
                    study_id, disease, probabilities[disease],
                    selection.abnormal[disease], disease in selection.shared_fallback,
                )
            )
            doc["heatmap_png"] = f"/studies/{study_id}/heatmap/{disease}.png"
            doc["heatmap_raw_png"] = f"/studies/{study_id}/heatmap/{disease}.png?raw=1"
            doc["crop_png"] = f"/studies/{study_id}/crop/{disease}.png"
            findings.append(doc)
        normality = self.normality_sentences(study_id, selection.normality)

        report = assemble_from_parts(
            [(f["disease"], f["probability"], f["sentences"]) for f in findings], normality
        )
        provenance = provenance_block(
            self.config(threshold).to_dict(),
            model_hashes=self.bundle.model_hashes(),
            seed=self.settings.seed,
            warnings=[w for f in findings for w in f["warnings"]],
        )
        provenance["package_version"] = __version__
        doc = {
            "study_id": study_id,
            "threshold": threshold,
            "probabilities": probabilities,
            "present": present,
            "is_normal": not present,
            "findings": findings,
            "report": report.to_dict(),
            "provenance": provenance,
        }
        self.store.write_cache(study_id, cache_name, doc)
        return doc

    def ensure_session(self, study_id: str) -> None:
        if self.store.has_session(study_id):
            return
        doc = self.interpretation(study_id, self.settings.default_threshold)
        self.store.create_session(study_id, doc["report"]["text"])


def create_app(settings: ServiceSettings, load_models: bool = True) -> FastAPI:
    """Build the service. load_models=False skips artifact loading and is
    only for schema export; endpoints are not callable in that mode."""
    if load_models:
        bundle = load_bundle(settings.models_dir)
        store = ReviewStore(settings.storage_dir)
        interpreter = CachingInterpreter(bundle, store, settings)
    else:
        bundle = store = interpreter = None

    app = FastAPI(
        title="raydraft review service",
        version=__version__,
        description="Chest X-ray interpretation with heatmap visual support "
        "and a review-revise-finalize report workflow.",
    )

    @app.get("/healthz", response_model=HealthModel)
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/studies", response_model=StudyCreated, status_code=201)
    def upload_study(image: UploadFile = File(...)):
        data = image.file.read()
        if len(data) > settings.max_upload_bytes:
            raise HTTPException(413, detail=f"upload exceeds {settings.max_upload_bytes} bytes")
        try:
            with Image.open(io.BytesIO(data)) as probe:
                probe.verify()
            with Image.open(io.BytesIO(data)) as img:
                fmt = (img.format or "").upper()
                gray = img.convert("L")
                buffer = io.BytesIO()
                gray.save(buffer, format="PNG")
        except HTTPException:
            raise
        except Exception as exc:
            raise HTTPException(400, detail=f"not a decodable image: {exc}")
        if fmt not in ("PNG", "JPEG"):
            raise HTTPException(400, detail=f"unsupported image format {fmt or 'unknown'}; use PNG or JPEG")
        study_id = store.create_study(buffer.getvalue())
        if settings.eager_interpretation:
            interpreter.ensure_session(study_id)
        return {"study_id": study_id}

    @app.get("/studies/{study_id}/image.png")
    def study_image(study_id: str):
        path = store.image_path(study_id)
        if not path.exists():
            raise HTTPException(404, detail=f"unknown study {study_id}")
        return FileResponse(path, media_type="image/png")

    @app.get("/studies/{study_id}/interpretation", response_model=InterpretationModel)
    def interpretation(
        study_id: str,
        threshold: float | None = Query(default=None, gt=0.0, lt=1.0),
    ):
        tau = settings.default_threshold if threshold is None else threshold
        try:
            doc = interpreter.interpretation(study_id, tau)
            interpreter.ensure_session(study_id)
        except StudyNotFound:
            raise HTTPException(404, detail=f"unknown study {study_id}")
        return doc

    @app.get("/studies/{study_id}/heatmap/{disease}.png")
    def heatmap(study_id: str, disease: str, raw: bool = False):
        suffix = "raw" if raw else "overlay"
        path = store.study_dir(study_id) / "findings" / f"{disease}_{suffix}.png"
        if not path.exists():
            raise HTTPException(404, detail=f"no heatmap for {disease!r} on study {study_id}")
        return FileResponse(path, media_type="image/png")

    @app.get("/studies/{study_id}/crop/{disease}.png")
    def crop(study_id: str, disease: str):
        path = store.study_dir(study_id) / "findings" / f"{disease}_crop.png"
        if not path.exists():
            raise HTTPException(404, detail=f"no crop for {disease!r} on study {study_id}")
        return FileResponse(path, media_type="image/png")

    @app.get("/studies/{study_id}/session", response_model=SessionModel)
    def session(study_id: str):
        try:
            interpreter.ensure_session(study_id)
            return store.get_session(study_id)
        except StudyNotFound:
            raise HTTPException(404, detail=f"unknown study {study_id}")

    @app.put("/studies/{study_id}/report", response_model=SessionModel)
    def edit_report(
        study_id: str,
        edit: ReportEdit,
        if_match_audit_length: int | None = Header(default=None, alias="If-Match-Audit-Length"),
    ):
        try:
            interpreter.ensure_session(study_id)
            return store.update_draft(study_id, edit.text, if_match_audit_length)
        except StudyNotFound:
            raise HTTPException(404, detail=f"unknown study {study_id}")
        except SessionFinalized:
            raise HTTPException(409, detail="session is finalized; no further edits")
        except VersionConflict as exc:
            raise HTTPException(412, detail=str(exc))

    @app.post("/studies/{study_id}/finalize", response_model=SessionModel)
    def finalize(study_id: str):
        try:
            interpreter.ensure_session(study_id)
            return store.finalize(study_id)
        except StudyNotFound:
            raise HTTPException(404, detail=f"unknown study {study_id}")
        except SessionFinalized:
            raise HTTPException(409, detail="session is already finalized")

    return app
