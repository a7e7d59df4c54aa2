"""Zero-shot inference: decode aspects from an image, then correct them.

The decoder was trained on text embeddings, so feeding it an image embedding
crosses a representation gap and the raw generations drift.  Correction
re-grounds each decoded aspect against two evidence sources from the same
image: prompted VQA answers (one question per known attribute) and OCR
tokens.  Decoded aspects whose attribute was never prompted are the
generalized zero-shot cases and can only be corrected from OCR.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .adapters import AdapterSuite, AdapterUnavailableError, ImageUnreadableError, OcrToken
from .core import (
    Aspect,
    AspectSet,
    MalformedAspectError,
    ZeroVectorError,
    cosine_similarity,
    normalize_attribute,
    parse_aspect,
)
from .data import ProductRecord
from .training import DecoderCheckpoint, GreedyGenerator

log = logging.getLogger(__name__)

SOURCE_DECODER = "decoder"
SOURCE_PROMPT = "prompt"
SOURCE_OCR = "ocr"

BRANCH_SEEN = "seen-attribute"
BRANCH_ZERO_SHOT = "zero-shot"


@dataclass(frozen=True)
class InferenceConfig:
    """Correction thresholds plus the attribute vocabulary to prompt for.

    tau_d gates when a prompted answer simply replaces the decoded value;
    tau_c filters OCR tokens by confidence.  attribute_vocabulary comes from
    the training split and is kept sorted so prompting order is stable.
    """

    attribute_vocabulary: tuple[str, ...] = ()
    tau_d: float = 0.95
    tau_c: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_d <= 1.0 or not 0.0 <= self.tau_c <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        ordered = tuple(sorted({normalize_attribute(a) for a in self.attribute_vocabulary}))
        object.__setattr__(self, "attribute_vocabulary", ordered)


@dataclass(frozen=True)
class CandidateScore:
    value: str
    source: str
    score: float


@dataclass(frozen=True)
class AspectTraceEntry:
    """Audit record for one decoded aspect through correction."""

    attribute: str
    decoded_value: str
    branch: str
    source: str
    value: str
    prompt_similarity: float | None = None
    candidates: tuple[CandidateScore, ...] = ()


@dataclass(frozen=True)
class DecodeResult:
    aspects: AspectSet
    malformed_fragments: tuple[str, ...]
    raw_text: str


@dataclass(frozen=True)
class PromptCollection:
    answers: AspectSet
    errors: tuple[str, ...] = ()


@dataclass(frozen=True)
class ProductInference:
    product_id: str
    aspects: AspectSet
    trace: tuple[AspectTraceEntry, ...]
    malformed_fragments: tuple[str, ...] = ()
    error: str | None = None


def decode_aspects(
    image_ref: str, generator: GreedyGenerator, adapters: AdapterSuite
) -> DecodeResult:
    """Greedy-decode the image embedding and parse the aspect string.

    Fragments that do not parse as "attribute: value" are skipped and
    reported, never fatal; duplicated attributes collapse to the last value.
    """
    raw = generator.generate(adapters.encode_image(image_ref))
    aspects = AspectSet()
    malformed: list[str] = []
    stripped = raw.strip()
    if stripped:
        for fragment in stripped.split("; "):
            try:
                aspects.add(parse_aspect(fragment))
            except MalformedAspectError:
                malformed.append(fragment)
    return DecodeResult(aspects, tuple(malformed), raw)


def collect_prompt_answers(
    image_ref: str, adapters: AdapterSuite, config: InferenceConfig
) -> PromptCollection:
    """One VQA answer per vocabulary attribute; "unknown" answers are dropped.

    Per-attribute adapter failures are recorded and skipped so one bad prompt
    cannot sink the product.
    """
    answers = AspectSet()
    errors: list[str] = []
    for attribute in config.attribute_vocabulary:
        try:
            answer = adapters.answer_prompt(image_ref, attribute)
        except (AdapterUnavailableError, ImageUnreadableError) as exc:
            errors.append(f"{attribute}: {exc}")
            continue
        if answer.value == "unknown":
            continue
        if attribute not in answers:  # first by vocabulary order wins
            answers.add(Aspect(attribute, answer.value))
    return PromptCollection(answers, tuple(errors))


def ocr_candidate_values(tokens: Sequence[OcrToken]) -> tuple[tuple[str, str], ...]:
    """(value, source) candidates from OCR: single tokens then adjacent pairs.

    Pairs are formed only from tokens adjacent in the surviving sequence, so
    the pool can only shrink when tau_c rises.
    """
    singles = [(token.text, SOURCE_OCR) for token in tokens]
    pairs = [
        (f"{tokens[i].text} {tokens[i + 1].text}", SOURCE_OCR)
        for i in range(len(tokens) - 1)
    ]
    return tuple(singles + pairs)


class _ValueScorer:
    """Cosine scoring of candidate values against a decoded value."""

    def __init__(self, adapters: AdapterSuite) -> None:
        self._adapters = adapters
        self._cache: dict[str, object] = {}

    def _embed(self, value: str):
        if value not in self._cache:
            self._cache[value] = self._adapters.encode_text(value)
        return self._cache[value]

    def score(self, decoded_value: str, candidate_value: str) -> float:
        try:
            return cosine_similarity(self._embed(decoded_value), self._embed(candidate_value))
        except ZeroVectorError:
            return float("-inf")


def correct_aspects(
    decoded: AspectSet,
    prompted: AspectSet,
    ocr_tokens: Sequence[OcrToken],
    config: InferenceConfig,
    adapters: AdapterSuite,
) -> tuple[AspectSet, tuple[AspectTraceEntry, ...]]:
    """Re-ground each decoded aspect in prompt and OCR evidence.

    For a decoded aspect whose attribute was prompted: if the prompted value
    embeds within tau_d (strict >) of the decoded value, the prompted aspect
    is emitted; otherwise the best-scoring candidate among the prompted value
    and the OCR pool replaces the value.  For unprompted (zero-shot)
    attributes the OCR pool alone is searched; an empty pool leaves the
    decoded aspect unchanged.  Total: one output aspect and one trace entry
    per decoded aspect, attribute always preserved.
    """
    scorer = _ValueScorer(adapters)
    ocr_pool = ocr_candidate_values(ocr_tokens)
    corrected = AspectSet()
    trace: list[AspectTraceEntry] = []
    for aspect in decoded:
        prompted_aspect = prompted.get(aspect.attribute)
        if prompted_aspect is not None:
            similarity = scorer.score(aspect.value, prompted_aspect.value)
            if similarity > config.tau_d:
                chosen = Aspect(aspect.attribute, prompted_aspect.value)
                corrected.add(chosen)
                trace.append(
                    AspectTraceEntry(
                        attribute=aspect.attribute,
                        decoded_value=aspect.value,
                        branch=BRANCH_SEEN,
                        source=SOURCE_PROMPT,
                        value=chosen.value,
                        prompt_similarity=similarity,
                    )
                )
                continue
            pool = [(prompted_aspect.value, SOURCE_PROMPT), *ocr_pool]
            entry = _pick_best(aspect, pool, scorer, BRANCH_SEEN, similarity)
        else:
            entry = _pick_best(aspect, list(ocr_pool), scorer, BRANCH_ZERO_SHOT, None)
        corrected.add(Aspect(aspect.attribute, entry.value))
        trace.append(entry)
    return corrected, tuple(trace)


def _pick_best(
    aspect: Aspect,
    pool: list[tuple[str, str]],
    scorer: _ValueScorer,
    branch: str,
    prompt_similarity: float | None,
) -> AspectTraceEntry:
    if not pool:
        return AspectTraceEntry(
            attribute=aspect.attribute,
            decoded_value=aspect.value,
            branch=branch,
            source=SOURCE_DECODER,
            value=aspect.value,
            prompt_similarity=prompt_similarity,
        )
    scored = tuple(
        CandidateScore(value, source, scorer.score(aspect.value, value))
        for value, source in pool
    )
    best = scored[0]
    for candidate in scored[1:]:  # first maximum wins ties
        if candidate.score > best.score:
            best = candidate
    return AspectTraceEntry(
        attribute=aspect.attribute,
        decoded_value=aspect.value,
        branch=branch,
        source=best.source,
        value=best.value,
        prompt_similarity=prompt_similarity,
        candidates=scored,
    )


def infer_product(
    record: ProductRecord,
    generator: GreedyGenerator,
    adapters: AdapterSuite,
    config: InferenceConfig,
    correct: bool = True,
) -> ProductInference:
    """Decode, gather evidence, and correct one product's aspects.

    correct=False skips the evidence pass and returns the raw decode, which
    is what the correction ablation compares against.
    """
    decode = decode_aspects(record.image_ref, generator, adapters)
    if not correct:
        trace = tuple(
            AspectTraceEntry(
                attribute=a.attribute,
                decoded_value=a.value,
                branch=BRANCH_ZERO_SHOT if a.attribute not in config.attribute_vocabulary else BRANCH_SEEN,
                source=SOURCE_DECODER,
                value=a.value,
            )
            for a in decode.aspects
        )
        return ProductInference(
            record.product_id, decode.aspects, trace, decode.malformed_fragments
        )
    prompts = collect_prompt_answers(record.image_ref, adapters, config)
    for message in prompts.errors:
        log.warning("prompt failure on %s: %s", record.product_id, message)
    tokens = adapters.ocr_tokens(record.image_ref, config.tau_c)
    corrected, trace = correct_aspects(
        decode.aspects, prompts.answers, tokens, config, adapters
    )
    return ProductInference(
        record.product_id, corrected, trace, decode.malformed_fragments
    )


def infer_batch(
    records: Sequence[ProductRecord],
    generator: GreedyGenerator,
    adapters: AdapterSuite,
    config: InferenceConfig,
    workers: int = 1,
    correct: bool = True,
) -> list[ProductInference]:
    """Order-preserving batch inference.

    Image-level failures become result rows with an error note and empty
    aspects, keeping one row per input product.
    """

    def run_one(record: ProductRecord) -> ProductInference:
        try:
            return infer_product(record, generator, adapters, config, correct=correct)
        except (ImageUnreadableError, AdapterUnavailableError) as exc:
            log.error("inference failed for %s: %s", record.product_id, exc)
            return ProductInference(
                record.product_id, AspectSet(), (), (), error=str(exc)
            )

    if workers <= 1:
        return [run_one(record) for record in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, records))
