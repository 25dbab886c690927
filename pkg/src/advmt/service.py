"""HTTP service exposing a :class:`ModelAdapter` over the ``advmt/1`` JSON protocol.

Matrices travel as ``{"shape": [rows, cols], "dtype": "float32", "data": [...]}``
with ``data`` flattened row-major.
"""
from __future__ import annotations

import threading

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .gateway import PROTOCOL_VERSION, CapabilityError, EmptyInputError, EncoderLatents, ModelAdapter
from .tokenizer import TokenizedText


class Matrix(BaseModel):
    shape: tuple[int, int]
    dtype: str = "float32"
    data: list[float]


def pack(a: np.ndarray) -> dict:
    a = np.atleast_2d(np.asarray(a, dtype=np.float32))
    return {"shape": list(a.shape), "dtype": "float32", "data": a.ravel().tolist()}


def unpack(obj) -> np.ndarray:
    """Accept either a shape-headed flat matrix or nested row lists."""
    if isinstance(obj, Matrix):
        obj = obj.model_dump()
    if isinstance(obj, dict):
        rows, cols = obj["shape"]
        data = np.asarray(obj["data"], dtype=np.float32)
        if data.size != rows * cols:
            raise ValueError(f"matrix payload has {data.size} values, header says {rows}x{cols}")
        return data.reshape(rows, cols).astype(np.float64)
    return np.atleast_2d(np.asarray(obj, dtype=np.float32)).astype(np.float64)


class TextIn(BaseModel):
    text: str
    token_ids: list[int] | None = None


class TextOut(BaseModel):
    version: str = PROTOCOL_VERSION
    text: str
    token_ids: list[int]
    lang: str | None = None


class LossGradIn(BaseModel):
    src: str
    ref: str
    src_ids: list[int] | None = None
    ref_ids: list[int] | None = None


class LossGradOut(BaseModel):
    version: str = PROTOCOL_VERSION
    loss: float
    grad: Matrix


class EncodeOut(BaseModel):
    version: str = PROTOCOL_VERSION
    latents: Matrix
    h: int
    source_len: int


class DecodeIn(BaseModel):
    latents: Matrix | list[list[float]]
    source_len: int | None = None


class VjpIn(BaseModel):
    text: str
    token_ids: list[int] | None = None
    grad_latents: Matrix | list[list[float]]


class GradOut(BaseModel):
    version: str = PROTOCOL_VERSION
    grad: Matrix


class VocabOut(BaseModel):
    version: str = PROTOCOL_VERSION
    size: int
    dim: int
    embeddings: Matrix
    word_initial_mask: list[bool]
    protected_mask: list[bool]
    tokens: list[str]
    direction: tuple[str, str]
    model_id: str


class CapabilitiesOut(BaseModel):
    version: str = PROTOCOL_VERSION
    translate: bool
    encode: bool
    loss_grad: bool
    vocab: bool
    decode: bool = False
    encode_vjp: bool = False
    model_id: str = ""
    direction: tuple[str, str] = ("src", "tgt")


class ErrorOut(BaseModel):
    version: str = PROTOCOL_VERSION
    error: str
    kind: str = Field(description="capability | empty_input | bad_request")


def create_app(adapter: ModelAdapter) -> FastAPI:
    app = FastAPI(title="advmt model service", version=PROTOCOL_VERSION)
    # adapters are single-threaded; the endpoints run in a thread pool
    lock = threading.Lock()
    caps = adapter.capabilities()

    def require(cap: str, msg: str):
        if not caps.get(cap):
            raise CapabilityError(msg)

    def source(text: str, ids) -> TokenizedText:
        if ids is not None:
            return adapter.tokenizer.from_ids(ids, lang=adapter.direction[0])
        return adapter.tokenize(text)

    def target(text: str, ids) -> TokenizedText:
        if ids is not None:
            return adapter.tokenizer.from_ids(ids, lang=adapter.direction[1])
        return adapter.target_text(text)

    def text_out(t: TokenizedText) -> TextOut:
        return TextOut(text=t.text, token_ids=list(map(int, t.token_ids)), lang=t.lang)

    @app.exception_handler(CapabilityError)
    async def _cap(request: Request, exc: CapabilityError):
        return JSONResponse(status_code=501, content=ErrorOut(error=str(exc), kind="capability").model_dump())

    @app.exception_handler(EmptyInputError)
    async def _empty(request: Request, exc: EmptyInputError):
        return JSONResponse(status_code=422, content=ErrorOut(error=str(exc), kind="empty_input").model_dump())

    @app.exception_handler(RequestValidationError)
    async def _invalid(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422, content=ErrorOut(error=str(exc.errors()), kind="bad_request").model_dump())

    @app.exception_handler(ValueError)
    async def _bad(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content=ErrorOut(error=str(exc), kind="bad_request").model_dump())

    @app.get("/capabilities", response_model=CapabilitiesOut)
    def capabilities():
        return CapabilitiesOut(**{k: bool(caps.get(k, False)) for k in
                                  ("translate", "encode", "loss_grad", "vocab", "decode", "encode_vjp")},
                               model_id=adapter.model_id, direction=tuple(adapter.direction))

    @app.get("/vocab", response_model=VocabOut)
    def vocab():
        require("vocab", "vocab unsupported")
        v = adapter.vocab
        return VocabOut(size=v.size, dim=v.dim, embeddings=Matrix(**pack(v.embeddings)),
                        word_initial_mask=v.word_initial_mask.tolist(), protected_mask=v.protected_mask.tolist(),
                        tokens=list(adapter.tokenizer.tokens), direction=tuple(adapter.direction),
                        model_id=adapter.model_id)

    @app.post("/translate", response_model=TextOut)
    def translate(body: TextIn):
        with lock:
            src = source(body.text, body.token_ids)
            return text_out(adapter.translate(src))

    @app.post("/encode", response_model=EncodeOut)
    def encode(body: TextIn):
        require("encode", "encode unsupported")
        with lock:
            z = adapter.encode(source(body.text, body.token_ids))
        return EncodeOut(latents=Matrix(**pack(z.values)), h=z.values.shape[1], source_len=z.source_len)

    @app.post("/decode", response_model=TextOut)
    def decode(body: DecodeIn):
        require("decode", "decode_from_latents unsupported")
        values = unpack(body.latents)
        with lock:
            out = adapter.decode_from_latents(EncoderLatents(values, body.source_len or values.shape[0]))
        return text_out(out)

    @app.post("/loss_grad", response_model=LossGradOut)
    def loss_grad(body: LossGradIn):
        require("loss_grad", "gradients unsupported")
        with lock:
            loss, grad = adapter.loss_and_grad(source(body.src, body.src_ids), target(body.ref, body.ref_ids))
        return LossGradOut(loss=float(loss), grad=Matrix(**pack(grad)))

    @app.post("/encode_vjp", response_model=GradOut)
    def encode_vjp(body: VjpIn):
        require("encode_vjp", "encoder gradients unsupported")
        with lock:
            g = adapter.encode_vjp(source(body.text, body.token_ids), unpack(body.grad_latents))
        return GradOut(grad=Matrix(**pack(g)))

    return app


def serve(adapter: ModelAdapter, host: str = "127.0.0.1", port: int = 8000, log_level: str = "warning"):
    import uvicorn

    uvicorn.run(create_app(adapter), host=host, port=port, log_level=log_level)
