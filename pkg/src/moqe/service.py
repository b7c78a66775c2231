"""HTTP service exposing the inference engine."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import data as data_mod
from .errors import ContractError, IntegrityError


class InferRequest(BaseModel):
    image: Optional[List[List[List[float]]]] = None  # [C][H][W]
    tokens: Optional[List[int]] = None


class InferResponse(BaseModel):
    prediction: int
    chosen_expert: int
    probs: List[float]
    entropy: float
    router_ms: float
    load_ms: float
    expert_ms: float
    switched: bool
    logits: Optional[List[float]] = None


class HealthResponse(BaseModel):
    status: str
    kind: str
    n_experts: int
    resident_expert: Optional[int]
    requests_served: int


def create_app(engine):
    app = FastAPI(title="routed quantized-expert inference")
    app.state.engine = engine

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(
            status="ok",
            kind=engine.kind,
            n_experts=engine.router.n_experts,
            resident_expert=engine.residency.resident_id,
            requests_served=engine.requests_served,
        )

    @app.get("/residency")
    def residency():
        return engine.residency.to_dict()

    @app.get("/memory")
    def memory():
        try:
            return engine.memory_report()
        except ContractError as e:
            raise HTTPException(status_code=409, detail=str(e))

    @app.get("/stats")
    def stats():
        try:
            return engine.timing.summary()
        except ContractError as e:
            raise HTTPException(status_code=409, detail=str(e))

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        if engine.kind == data_mod.CV_KIND:
            if req.image is None:
                raise HTTPException(status_code=422, detail="this service expects 'image'")
            sample = np.asarray(req.image, dtype=np.float64)
        else:
            if req.tokens is None:
                raise HTTPException(status_code=422, detail="this service expects 'tokens'")
            sample = np.asarray(req.tokens, dtype=np.int64)
        try:
            out, record, timing = engine.infer(sample)
        except (ContractError, IndexError) as e:
            raise HTTPException(status_code=422, detail=str(e))
        except IntegrityError as e:
            raise HTTPException(status_code=500, detail=str(e))
        if engine.kind == data_mod.CV_KIND:
            prediction = int(out.argmax())
            logits = out.tolist()
        else:
            prediction = int(out[-1].argmax())  # next-token prediction
            logits = None
        return InferResponse(
            prediction=prediction,
            chosen_expert=record.chosen,
            probs=record.probs.tolist(),
            entropy=record.entropy,
            router_ms=timing["router_ms"],
            load_ms=timing["load_ms"],
            expert_ms=timing["expert_ms"],
            switched=timing["switched"],
            logits=logits,
        )

    return app
