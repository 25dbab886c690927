"""Wire-protocol client: a :class:`ModelAdapter` backed by a remote ``advmt/1`` server."""
from __future__ import annotations

import httpx
import numpy as np

from .gateway import (PROTOCOL_VERSION, CapabilityError, EmptyInputError, EncoderLatents, GatewayError,
                      ModelAdapter, ProtocolError, VocabTable, require_nonempty)
from .service import pack, unpack
from .tokenizer import SubwordTokenizer, TokenizedText


class RemoteAdapter(ModelAdapter):
    """Talks to a server created by :func:`advmt.service.create_app`.

    Token ids are always sent alongside text so flipped sequences reach the
    model verbatim instead of being re-segmented. Each call is an independent
    request, so one instance may be shared across threads.
    """

    def __init__(self, url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self.url = url.rstrip("/")
        self._http = client or httpx.Client(base_url=self.url, timeout=timeout)
        self._caps = self._get("/capabilities")
        self.direction = tuple(self._caps["direction"])
        self.model_id = self._caps.get("model_id") or self.url
        self._vocab = None
        if self._caps.get("vocab"):
            v = self._get("/vocab")
            self.tokenizer = SubwordTokenizer.from_dict({"tokens": v["tokens"]})
            self._vocab = VocabTable(unpack(v["embeddings"]), v["word_initial_mask"], v["protected_mask"])
            if self._vocab.size != v["size"] or self._vocab.dim != v["dim"]:
                raise ProtocolError("vocab header disagrees with embedding payload")
        else:
            self.tokenizer = SubwordTokenizer.default()

    def close(self):
        self._http.close()

    def _check(self, resp: httpx.Response) -> dict:
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"malformed response ({resp.status_code})") from exc
        if not isinstance(data, dict) or data.get("version") != PROTOCOL_VERSION:
            got = data.get("version") if isinstance(data, dict) else None
            raise ProtocolError(f"protocol version mismatch: expected {PROTOCOL_VERSION}, got {got!r}")
        if resp.status_code >= 400:
            kind = data.get("kind")
            msg = data.get("error", f"HTTP {resp.status_code}")
            if kind == "capability":
                raise CapabilityError(msg)
            if kind == "empty_input":
                raise EmptyInputError(msg)
            raise GatewayError(msg)
        return data

    def _get(self, path: str) -> dict:
        try:
            return self._check(self._http.get(path))
        except httpx.HTTPError as exc:
            raise GatewayError(f"GET {path} failed: {exc}") from exc

    def _post(self, path: str, body: dict) -> dict:
        try:
            return self._check(self._http.post(path, json=body))
        except httpx.HTTPError as exc:
            raise GatewayError(f"POST {path} failed: {exc}") from exc

    def capabilities(self) -> dict[str, bool]:
        return {k: bool(self._caps.get(k, False))
                for k in ("translate", "encode", "loss_grad", "vocab", "decode", "encode_vjp")}

    @property
    def vocab(self) -> VocabTable:
        if self._vocab is None:
            raise CapabilityError("vocab unsupported")
        return self._vocab

    def _text_in(self, t: TokenizedText) -> dict:
        return {"text": t.text, "token_ids": [int(i) for i in t.token_ids]}

    def _text_out(self, data: dict, lang) -> TokenizedText:
        return self.tokenizer.from_ids(data["token_ids"], lang=data.get("lang", lang))

    def translate(self, src: TokenizedText) -> TokenizedText:
        require_nonempty(src)
        return self._text_out(self._post("/translate", self._text_in(src)), self.direction[1])

    def loss_and_grad(self, src, ref_target):
        if not self._caps.get("loss_grad"):
            raise CapabilityError("gradients unsupported")
        require_nonempty(src)
        require_nonempty(ref_target)
        data = self._post("/loss_grad", {"src": src.text, "ref": ref_target.text,
                                         "src_ids": list(map(int, src.token_ids)),
                                         "ref_ids": list(map(int, ref_target.token_ids))})
        return float(data["loss"]), unpack(data["grad"])

    def encode(self, src) -> EncoderLatents:
        if not self._caps.get("encode"):
            raise CapabilityError("encode unsupported")
        require_nonempty(src)
        data = self._post("/encode", self._text_in(src))
        return EncoderLatents(unpack(data["latents"]), int(data["source_len"]))

    def decode_from_latents(self, z: EncoderLatents) -> TokenizedText:
        if not self._caps.get("decode"):
            raise CapabilityError("decode_from_latents unsupported")
        z.check_finite()
        data = self._post("/decode", {"latents": pack(z.values), "source_len": z.source_len})
        return self._text_out(data, self.direction[1])

    def encode_vjp(self, src, grad_latents) -> np.ndarray:
        if not self._caps.get("encode_vjp"):
            raise CapabilityError("encoder gradients unsupported")
        data = self._post("/encode_vjp", {**self._text_in(src), "grad_latents": pack(grad_latents)})
        return unpack(data["grad"])
