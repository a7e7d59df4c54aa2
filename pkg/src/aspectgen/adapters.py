"""Access layer for the frozen models the pipeline depends on.

Every heavy model (dual encoder, captioner/VQA model, OCR engine) sits behind
the AdapterSuite interface.  Three implementations are provided:

* StubAdapters: deterministic, file-backed fakes fast enough for tests.  A
  stub "image" is a path ``X.img`` with sidecar files ``X.img.txt`` (hidden
  description), ``X.img.ocr.json`` (list of [text, confidence] pairs) and
  ``X.img.vqa.json`` ({attribute: answer} oracle).
* SubprocessAdapters: client for a real adapter process speaking
  line-delimited JSON over stdin/stdout.
* CachedAdapters: transparent disk cache around any suite; the frozen models
  never change, so responses are cacheable forever.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import threading
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    AspectGenError,
    EmbeddingVector,
    normalize_attribute,
    _collapse_ws,
)

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = "Question: What is the {attribute} of the product? Answer:"

_TRAILING_PUNCT = ".,;:!?"


class AdapterUnavailableError(AspectGenError):
    """The backing model process cannot be reached or misbehaved."""


class InputTooLongError(AspectGenError):
    """The input exceeds the model's context limit."""


class ImageUnreadableError(AspectGenError):
    """The image reference cannot be opened or decoded."""


@dataclass(frozen=True)
class OcrToken:
    """One recognized text token with its confidence in [0, 1]."""

    text: str
    confidence: float

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("OCR token text is empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"OCR confidence out of range: {self.confidence}")


@dataclass(frozen=True)
class PromptAnswer:
    """Cleaned answer to one attribute prompt, with the raw model response."""

    attribute: str
    value: str
    raw_response: str


@dataclass(frozen=True)
class AdapterConfig:
    """Wiring for the frozen-model suite.

    kind "stub" needs only embedding_dim/noise; kind "subprocess" launches
    ``command`` and talks the JSON wire protocol to it.  cache_dir (or the
    VIOC_CACHE_DIR environment variable, which wins) enables the disk cache.
    """

    kind: str = "stub"
    embedding_dim: int = 64
    noise: float = 0.0
    command: tuple[str, ...] = ()
    cache_dir: str | None = None
    max_input_chars: int = 4096
    dual_encoder_id: str | None = None
    caption_model_id: str | None = None
    ocr_engine_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("stub", "subprocess"):
            raise ValueError(f"unknown adapter kind: {self.kind!r}")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be at least 2")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        if self.kind == "subprocess" and not self.command:
            raise ValueError("subprocess adapters need a command")


def render_prompt(attribute: str) -> str:
    """Fill the fixed VQA prompt template for one attribute."""
    return PROMPT_TEMPLATE.format(attribute=attribute)


def clean_answer(raw: str) -> str:
    """Normalize a raw VQA response to a bare value string.

    Takes the text up to the first newline, trims, lowercases, and strips
    trailing punctuation.  May return "" for degenerate responses.
    """
    first_line = raw.split("\n", 1)[0]
    return first_line.strip().lower().rstrip(_TRAILING_PUNCT).strip()


def filter_ocr_tokens(
    entries: Sequence[tuple[str, float]], tau_c: float
) -> tuple[OcrToken, ...]:
    """Keep tokens with confidence strictly above tau_c, lowercased/trimmed."""
    kept = []
    for text, confidence in entries:
        if confidence <= tau_c:
            continue
        cleaned = text.strip().lower()
        if cleaned:
            kept.append(OcrToken(cleaned, float(confidence)))
    return tuple(kept)


class AdapterSuite(ABC):
    """Uniform access to the frozen dual encoder, captioner/VQA, and OCR."""

    embedding_dim: int
    dual_encoder_id: str
    caption_model_id: str
    ocr_engine_id: str

    @abstractmethod
    def encode_text(self, text: str) -> EmbeddingVector:
        """Embed non-empty text into the shared space."""

    @abstractmethod
    def encode_image(self, image_ref: str) -> EmbeddingVector:
        """Embed an image into the same space as encode_text."""

    @abstractmethod
    def caption(self, image_ref: str) -> str:
        """Describe the image in one line of text."""

    @abstractmethod
    def answer_prompt(self, image_ref: str, attribute: str) -> PromptAnswer:
        """Ask the VQA model for one attribute's value."""

    @abstractmethod
    def ocr_tokens(self, image_ref: str, tau_c: float) -> tuple[OcrToken, ...]:
        """Recognized tokens with confidence strictly above tau_c."""

    def close(self) -> None:  # pragma: no cover - default no-op
        pass


def _ngram_embed(text: str, dim: int) -> np.ndarray:
    """Hashed character n-gram bag (n = 1..3), L2-normalized, float64."""
    canon = _collapse_ws(text.lower())
    counts = np.zeros(dim, dtype=np.float64)
    for n in (1, 2, 3):
        for i in range(len(canon) - n + 1):
            gram = canon[i : i + n]
            counts[zlib.crc32(gram.encode("utf-8")) % dim] += 1.0
    norm = np.linalg.norm(counts)
    if norm > 0:
        counts /= norm
    return counts


class StubAdapters(AdapterSuite):
    """Deterministic fixture-backed adapters for desk-scale runs.

    encode_image embeds the image's hidden description; with noise = 0 it is
    bit-identical to encode_text of that description, so the single shared
    space the real dual encoder provides is reproduced exactly.  noise > 0
    rotates the image embedding away from the text embedding by a
    deterministic per-image angle, keeping cosine >= 1 - noise.
    """

    def __init__(
        self,
        embedding_dim: int = 64,
        noise: float = 0.0,
        max_input_chars: int = 4096,
    ) -> None:
        if embedding_dim < 2:
            raise ValueError("embedding_dim must be at least 2")
        if not 0.0 <= noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        self.embedding_dim = embedding_dim
        self.noise = noise
        self.max_input_chars = max_input_chars
        self.dual_encoder_id = f"stub-ngram-{embedding_dim}-n{noise:g}"
        self.caption_model_id = "stub-caption-v1"
        self.ocr_engine_id = "stub-ocr-v1"

    # -- file plumbing -----------------------------------------------------

    def _image_path(self, image_ref: str) -> Path:
        path = Path(image_ref)
        if not path.is_file():
            raise ImageUnreadableError(f"image not found: {image_ref}")
        return path

    def _hidden_description(self, image_ref: str) -> str:
        sidecar = Path(str(self._image_path(image_ref)) + ".txt")
        if not sidecar.is_file():
            raise ImageUnreadableError(f"missing description sidecar: {sidecar}")
        text = sidecar.read_text(encoding="utf-8").rstrip("\n")
        if not text.strip():
            raise ImageUnreadableError(f"empty description sidecar: {sidecar}")
        return text

    # -- adapter surface ----------------------------------------------------

    def encode_text(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise ValueError("encode_text needs non-empty text")
        if len(text) > self.max_input_chars:
            raise InputTooLongError(
                f"text of {len(text)} chars exceeds limit {self.max_input_chars}"
            )
        return EmbeddingVector(_ngram_embed(text, self.embedding_dim))

    def encode_image(self, image_ref: str) -> EmbeddingVector:
        description = self._hidden_description(image_ref)
        clean = _ngram_embed(description, self.embedding_dim)
        if self.noise == 0.0:
            return EmbeddingVector(clean)
        return EmbeddingVector(self._perturb(clean, description))

    def _perturb(self, unit: np.ndarray, key: str) -> np.ndarray:
        seed = int.from_bytes(
            hashlib.sha256(("noise|" + key).encode("utf-8")).digest()[:8], "big"
        )
        rng = np.random.default_rng(seed)
        # Rotate toward a deterministic random direction orthogonal to the
        # clean embedding; the mix keeps cosine(image, text) = 1 - noise * r.
        for _ in range(8):
            raw = rng.standard_normal(unit.shape[0])
            ortho = raw - np.dot(raw, unit) * unit
            norm = np.linalg.norm(ortho)
            if norm > 1e-9:
                ortho /= norm
                break
        else:  # pragma: no cover - probability ~0
            raise AdapterUnavailableError("could not build a noise direction")
        target_cos = 1.0 - self.noise * rng.random()
        return target_cos * unit + np.sqrt(1.0 - target_cos**2) * ortho

    def caption(self, image_ref: str) -> str:
        return self._hidden_description(image_ref)

    def answer_prompt(self, image_ref: str, attribute: str) -> PromptAnswer:
        prompt = render_prompt(attribute)
        if len(prompt) > self.max_input_chars:
            raise InputTooLongError("prompt exceeds input limit")
        path = self._image_path(image_ref)
        oracle_path = Path(str(path) + ".vqa.json")
        raw = "unknown"
        if oracle_path.is_file():
            oracle = json.loads(oracle_path.read_text(encoding="utf-8"))
            raw = str(oracle.get(normalize_attribute(attribute), "unknown"))
        value = clean_answer(raw) or "unknown"
        return PromptAnswer(normalize_attribute(attribute), value, raw)

    def ocr_tokens(self, image_ref: str, tau_c: float) -> tuple[OcrToken, ...]:
        path = self._image_path(image_ref)
        sidecar = Path(str(path) + ".ocr.json")
        if not sidecar.is_file():
            return ()
        entries = json.loads(sidecar.read_text(encoding="utf-8"))
        return filter_ocr_tokens([(e[0], e[1]) for e in entries], tau_c)


_WIRE_ERROR_MAP = {
    "image_unreadable": ImageUnreadableError,
    "input_too_long": InputTooLongError,
    "adapter_unavailable": AdapterUnavailableError,
}


def wire_error_code(exc: Exception) -> str:
    """Map an adapter exception to its wire protocol error code."""
    if isinstance(exc, ImageUnreadableError):
        return "image_unreadable"
    if isinstance(exc, InputTooLongError):
        return "input_too_long"
    return "adapter_unavailable"


class SubprocessAdapters(AdapterSuite):
    """Client half of the adapter wire protocol.

    One JSON object per line on stdin: {"op": ..., "input": ..., "params": {}},
    one JSON object per line back on stdout: {"ok": bool, "result": ...,
    "error": str | null}.  The process is spawned lazily and reused; calls are
    serialized with a lock so the suite is safe for concurrent use.
    """

    def __init__(
        self,
        command: Sequence[str],
        embedding_dim: int,
        dual_encoder_id: str = "external-dual-encoder",
        caption_model_id: str = "external-captioner",
        ocr_engine_id: str = "external-ocr",
    ) -> None:
        if not command:
            raise ValueError("empty adapter command")
        self._command = list(command)
        self.embedding_dim = embedding_dim
        self.dual_encoder_id = dual_encoder_id
        self.caption_model_id = caption_model_id
        self.ocr_engine_id = ocr_engine_id
        self._proc: subprocess.Popen[str] | None = None
        self._lock = threading.Lock()

    def _ensure_proc(self) -> subprocess.Popen[str]:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self._command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as exc:
                raise AdapterUnavailableError(
                    f"cannot launch adapter {self._command!r}: {exc}"
                ) from exc
        return self._proc

    def _call(self, op: str, input_value: object, params: dict | None = None):
        request = json.dumps(
            {"op": op, "input": input_value, "params": params or {}},
            sort_keys=True,
        )
        with self._lock:
            proc = self._ensure_proc()
            assert proc.stdin is not None and proc.stdout is not None
            try:
                proc.stdin.write(request + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise AdapterUnavailableError(f"adapter pipe broke: {exc}") from exc
        if not line:
            raise AdapterUnavailableError("adapter process closed its stdout")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AdapterUnavailableError(f"bad adapter response: {line!r}") from exc
        if not response.get("ok"):
            message = response.get("error") or "unspecified adapter error"
            code = message.split(":", 1)[0].strip()
            raise _WIRE_ERROR_MAP.get(code, AdapterUnavailableError)(message)
        return response.get("result")

    def encode_text(self, text: str) -> EmbeddingVector:
        return self._vector(self._call("encode_text", text))

    def encode_image(self, image_ref: str) -> EmbeddingVector:
        return self._vector(self._call("encode_image", image_ref))

    def _vector(self, result: object) -> EmbeddingVector:
        if not isinstance(result, list) or len(result) != self.embedding_dim:
            raise AdapterUnavailableError(
                f"adapter returned a malformed vector (want dim {self.embedding_dim})"
            )
        return EmbeddingVector(np.asarray(result, dtype=np.float64))

    def caption(self, image_ref: str) -> str:
        result = self._call("caption", image_ref)
        if not isinstance(result, str) or not result.strip():
            raise AdapterUnavailableError("adapter returned an empty caption")
        return result

    def answer_prompt(self, image_ref: str, attribute: str) -> PromptAnswer:
        raw = self._call("vqa", image_ref, {"attribute": attribute})
        if not isinstance(raw, str):
            raise AdapterUnavailableError("adapter returned a non-string answer")
        value = clean_answer(raw) or "unknown"
        return PromptAnswer(normalize_attribute(attribute), value, raw)

    def ocr_tokens(self, image_ref: str, tau_c: float) -> tuple[OcrToken, ...]:
        result = self._call("ocr", image_ref)
        if not isinstance(result, list):
            raise AdapterUnavailableError("adapter returned malformed OCR output")
        return filter_ocr_tokens([(e[0], e[1]) for e in result], tau_c)

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            if self._proc.stdin is not None:
                self._proc.stdin.close()
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:  # pragma: no cover
                self._proc.kill()
        self._proc = None


def _canonical_json(value: object) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


class CachedAdapters(AdapterSuite):
    """Disk cache around another suite.

    Keys combine the backing model id, the operation, and a digest of the
    input (file contents for images, so moved-but-identical fixtures hit).
    One file per key; writes are atomic, so concurrent use is safe.
    """

    def __init__(self, inner: AdapterSuite, cache_dir: str | Path) -> None:
        self._inner = inner
        self._dir = Path(cache_dir)
        self._dir.mkdir(parents=True, exist_ok=True)
        self.embedding_dim = inner.embedding_dim
        self.dual_encoder_id = inner.dual_encoder_id
        self.caption_model_id = inner.caption_model_id
        self.ocr_engine_id = inner.ocr_engine_id

    def _image_digest(self, image_ref: str) -> str:
        path = Path(image_ref)
        if not path.is_file():
            raise ImageUnreadableError(f"image not found: {image_ref}")
        digest = hashlib.sha256()
        for candidate in (
            path,
            Path(str(path) + ".txt"),
            Path(str(path) + ".ocr.json"),
            Path(str(path) + ".vqa.json"),
        ):
            if candidate.is_file():
                digest.update(candidate.name.encode("utf-8"))
                digest.update(candidate.read_bytes())
        return digest.hexdigest()

    def _lookup(self, model_id: str, op: str, input_digest: str, params: dict):
        key = _canonical_json(
            {"model": model_id, "op": op, "input": input_digest, "params": params}
        )
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
        path = self._dir / f"{digest}.json"
        if path.is_file():
            return json.loads(path.read_text(encoding="utf-8"))["result"], path, True
        return None, path, False

    @staticmethod
    def _store(path: Path, result: object) -> None:
        payload = _canonical_json({"result": result})
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(payload, encoding="utf-8")
        os.replace(tmp, path)

    def encode_text(self, text: str) -> EmbeddingVector:
        input_digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        result, path, hit = self._lookup(
            self.dual_encoder_id, "encode_text", input_digest, {}
        )
        if not hit:
            result = list(self._inner.encode_text(text).values)
            self._store(path, result)
        return EmbeddingVector(np.asarray(result, dtype=np.float64))

    def encode_image(self, image_ref: str) -> EmbeddingVector:
        result, path, hit = self._lookup(
            self.dual_encoder_id, "encode_image", self._image_digest(image_ref), {}
        )
        if not hit:
            result = list(self._inner.encode_image(image_ref).values)
            self._store(path, result)
        return EmbeddingVector(np.asarray(result, dtype=np.float64))

    def caption(self, image_ref: str) -> str:
        result, path, hit = self._lookup(
            self.caption_model_id, "caption", self._image_digest(image_ref), {}
        )
        if not hit:
            result = self._inner.caption(image_ref)
            self._store(path, result)
        return str(result)

    def answer_prompt(self, image_ref: str, attribute: str) -> PromptAnswer:
        params = {"attribute": normalize_attribute(attribute)}
        result, path, hit = self._lookup(
            self.caption_model_id, "vqa", self._image_digest(image_ref), params
        )
        if not hit:
            answer = self._inner.answer_prompt(image_ref, attribute)
            result = {"value": answer.value, "raw_response": answer.raw_response}
            self._store(path, result)
        return PromptAnswer(
            normalize_attribute(attribute), result["value"], result["raw_response"]
        )

    def ocr_tokens(self, image_ref: str, tau_c: float) -> tuple[OcrToken, ...]:
        params = {"tau_c": tau_c}
        result, path, hit = self._lookup(
            self.ocr_engine_id, "ocr", self._image_digest(image_ref), params
        )
        if not hit:
            tokens = self._inner.ocr_tokens(image_ref, tau_c)
            result = [[t.text, t.confidence] for t in tokens]
            self._store(path, result)
        return tuple(OcrToken(text, conf) for text, conf in result)

    def close(self) -> None:
        self._inner.close()


def build_adapters(config: AdapterConfig) -> AdapterSuite:
    """Construct the configured suite, honoring VIOC_CACHE_DIR."""
    suite: AdapterSuite
    if config.kind == "stub":
        suite = StubAdapters(
            embedding_dim=config.embedding_dim,
            noise=config.noise,
            max_input_chars=config.max_input_chars,
        )
    else:
        suite = SubprocessAdapters(
            config.command,
            embedding_dim=config.embedding_dim,
            dual_encoder_id=config.dual_encoder_id or "external-dual-encoder",
            caption_model_id=config.caption_model_id or "external-captioner",
            ocr_engine_id=config.ocr_engine_id or "external-ocr",
        )
    if config.dual_encoder_id:
        suite.dual_encoder_id = config.dual_encoder_id
    if config.caption_model_id:
        suite.caption_model_id = config.caption_model_id
    if config.ocr_engine_id:
        suite.ocr_engine_id = config.ocr_engine_id
    cache_dir = os.environ.get("VIOC_CACHE_DIR") or config.cache_dir
    if cache_dir:
        suite = CachedAdapters(suite, cache_dir)
    return suite
