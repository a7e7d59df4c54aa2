import random

import pytest

from aspectgen.adapters import OcrToken, StubAdapters
from aspectgen.core import Aspect, AspectSet, cosine_similarity
from aspectgen.data import ProductRecord
from aspectgen.inference import (
    BRANCH_SEEN,
    BRANCH_ZERO_SHOT,
    SOURCE_DECODER,
    SOURCE_OCR,
    SOURCE_PROMPT,
    InferenceConfig,
    collect_prompt_answers,
    correct_aspects,
    decode_aspects,
    infer_batch,
    infer_product,
    ocr_candidate_values,
)

from conftest import write_image_bundle


class _FixedGenerator:
    """Stands in for the trained decoder: always emits the same string."""

    def __init__(self, text):
        self.text = text

    def generate(self, embedding):
        return self.text


def _stub():
    return StubAdapters(embedding_dim=64)


def test_inference_config_normalizes_vocabulary():
    config = InferenceConfig(attribute_vocabulary=("Type", "color", "TYPE "))
    assert config.attribute_vocabulary == ("color", "type")
    assert config.tau_d == 0.95
    assert config.tau_c == 0.5
    with pytest.raises(ValueError):
        InferenceConfig(tau_d=1.5)


def test_decode_aspects_skips_malformed_fragments(tmp_path):
    image = write_image_bundle(tmp_path, "a", "a red boot")
    generator = _FixedGenerator("type: boot; garbled fragment; color: red")
    result = decode_aspects(str(image), generator, _stub())
    assert list(result.aspects) == [Aspect("type", "boot"), Aspect("color", "red")]
    assert result.malformed_fragments == ("garbled fragment",)
    assert result.raw_text.startswith("type: boot")


def test_decode_aspects_empty_output(tmp_path):
    image = write_image_bundle(tmp_path, "a", "a red boot")
    result = decode_aspects(str(image), _FixedGenerator("   "), _stub())
    assert len(result.aspects) == 0
    assert result.malformed_fragments == ()


def test_collect_prompt_answers_drops_unknown(tmp_path):
    image = write_image_bundle(
        tmp_path, "a", "a red boot", vqa={"color": "red", "brand": "unknown"}
    )
    config = InferenceConfig(attribute_vocabulary=("color", "brand", "size"))
    collected = collect_prompt_answers(str(image), _stub(), config)
    assert list(collected.answers) == [Aspect("color", "red")]
    assert collected.errors == ()


def test_ocr_candidate_values_singles_then_adjacent_pairs():
    tokens = (OcrToken("steel", 0.9), OcrToken("knife", 0.8), OcrToken("set", 0.7))
    values = [v for v, _ in ocr_candidate_values(tokens)]
    assert values == ["steel", "knife", "set", "steel knife", "knife set"]
    assert all(source == SOURCE_OCR for _, source in ocr_candidate_values(tokens))
    assert ocr_candidate_values(()) == ()
    assert [v for v, _ in ocr_candidate_values((OcrToken("solo", 0.9),))] == ["solo"]


def test_correction_seen_attribute_trusts_close_prompt():
    decoded = AspectSet([Aspect("brand", "corsair")])
    prompted = AspectSet([Aspect("brand", "corsair")])
    config = InferenceConfig(attribute_vocabulary=("brand",))
    corrected, trace = correct_aspects(decoded, prompted, (), config, _stub())
    assert corrected.get("brand").value == "corsair"
    entry = trace[0]
    assert entry.branch == BRANCH_SEEN
    assert entry.source == SOURCE_PROMPT
    assert entry.prompt_similarity == pytest.approx(1.0)


def test_correction_seen_attribute_far_prompt_searches_pool():
    # Decoded "corsair gaming" vs prompted "maple": similarity is far below
    # tau_d, so the best of {prompted, OCR} by cosine to the decoded value
    # wins; the OCR token "corsair" is much closer than "maple".
    decoded = AspectSet([Aspect("brand", "corsair gaming")])
    prompted = AspectSet([Aspect("brand", "maple")])
    tokens = (OcrToken("corsair", 0.9), OcrToken("warranty", 0.8))
    config = InferenceConfig(attribute_vocabulary=("brand",), tau_d=0.95)
    corrected, trace = correct_aspects(decoded, prompted, tokens, config, _stub())
    assert corrected.get("brand").value == "corsair"
    assert trace[0].source == SOURCE_OCR
    assert trace[0].branch == BRANCH_SEEN
    assert trace[0].candidates[0].value == "maple"  # prompted scored first


def test_correction_zero_shot_attribute_uses_ocr_only():
    decoded = AspectSet([Aspect("material", "stainless stee")])
    prompted = AspectSet([Aspect("brand", "corsair")])  # different attribute
    tokens = (OcrToken("stainless", 0.9), OcrToken("steel", 0.9))
    config = InferenceConfig(attribute_vocabulary=("brand",))
    corrected, trace = correct_aspects(decoded, prompted, tokens, config, _stub())
    assert trace[0].branch == BRANCH_ZERO_SHOT
    assert corrected.get("material").value == "stainless steel"
    assert trace[0].source == SOURCE_OCR


def test_correction_zero_shot_empty_pool_keeps_decoded_value():
    decoded = AspectSet([Aspect("material", "suede")])
    config = InferenceConfig(attribute_vocabulary=())
    corrected, trace = correct_aspects(decoded, AspectSet(), (), config, _stub())
    assert corrected.get("material").value == "suede"
    assert trace[0].source == SOURCE_DECODER
    assert trace[0].candidates == ()


def test_correction_threshold_is_strict():
    decoded = AspectSet([Aspect("color", "red")])
    prompted = AspectSet([Aspect("color", "red")])
    # Identical values embed identically: similarity exactly 1.0.  With
    # tau_d = 1.0 the strict comparison fails and the pool path runs.
    config = InferenceConfig(attribute_vocabulary=("color",), tau_d=1.0)
    corrected, trace = correct_aspects(decoded, prompted, (), config, _stub())
    assert corrected.get("color").value == "red"
    assert trace[0].source == SOURCE_PROMPT  # best (only) pool candidate
    assert trace[0].candidates[0].score == pytest.approx(1.0)

    low = InferenceConfig(attribute_vocabulary=("color",), tau_d=0.0)
    _, trace_low = correct_aspects(decoded, prompted, (), low, _stub())
    assert trace_low[0].prompt_similarity == pytest.approx(1.0)
    assert trace_low[0].candidates == ()  # replaced directly, no search


def test_correction_preserves_attributes_and_arity():
    decoded = AspectSet([Aspect("type", "boot"), Aspect("color", "red")])
    prompted = AspectSet([Aspect("color", "navy")])
    tokens = (OcrToken("suede", 0.9),)
    config = InferenceConfig(attribute_vocabulary=("color",), tau_d=0.95)
    corrected, trace = correct_aspects(decoded, prompted, tokens, config, _stub())
    assert corrected.attributes() == decoded.attributes()
    assert len(trace) == len(decoded)


def _oracle_correct(decoded, prompted, tokens, config, adapters):
    """Independent restatement of the correction rule, built on raw cosines."""

    def cos(a, b):
        try:
            return cosine_similarity(adapters.encode_text(a), adapters.encode_text(b))
        except Exception:
            return float("-inf")

    pool = [t.text for t in tokens]
    pool += [f"{tokens[i].text} {tokens[i+1].text}" for i in range(len(tokens) - 1)]
    out = []
    for aspect in decoded:
        p = prompted.get(aspect.attribute)
        if p is not None:
            if cos(aspect.value, p.value) > config.tau_d:
                out.append((aspect.attribute, p.value))
                continue
            candidates = [p.value] + pool
        else:
            candidates = list(pool)
        if not candidates:
            out.append((aspect.attribute, aspect.value))
            continue
        best = max(candidates, key=lambda v: cos(aspect.value, v))
        # max() keeps the first maximal element, matching the tie rule.
        out.append((aspect.attribute, best))
    return out


_WORDS = ["red", "navy", "boot", "sandal", "corsair", "maple", "suede", "steel", "xl"]


def test_correction_matches_brute_force_oracle_on_random_cases():
    adapters = _stub()
    rng = random.Random(1234)
    for trial in range(150):
        tau_d = rng.choice([0.0, 0.3, 0.7, 0.95, 1.0])
        n_dec = rng.randint(1, 3)
        attrs = rng.sample(["type", "color", "brand", "material"], n_dec)
        decoded = AspectSet(
            Aspect(a, " ".join(rng.sample(_WORDS, rng.randint(1, 2)))) for a in attrs
        )
        vocab = tuple(a for a in attrs if rng.random() < 0.6)
        prompted = AspectSet(
            Aspect(a, rng.choice(_WORDS)) for a in vocab if rng.random() < 0.8
        )
        tokens = tuple(
            OcrToken(rng.choice(_WORDS), round(rng.uniform(0.51, 0.99), 2))
            for _ in range(rng.randint(0, 4))
        )
        config = InferenceConfig(attribute_vocabulary=vocab, tau_d=tau_d)
        corrected, _ = correct_aspects(decoded, prompted, tokens, config, adapters)
        got = [(a.attribute, a.value) for a in corrected]
        want = _oracle_correct(decoded, prompted, tokens, config, adapters)
        assert got == want, f"trial {trial}: {got} != {want}"


def _record(pid, image):
    return ProductRecord(
        product_id=pid,
        category="shoes",
        image_ref=str(image),
        title=None,
        gold_aspects=AspectSet([Aspect("type", "boot")]),
    )


def test_infer_product_correct_false_skips_evidence(tmp_path):
    image = write_image_bundle(
        tmp_path, "a", "a red boot", ocr=[("corsair", 0.9)], vqa={"type": "sandal"}
    )
    generator = _FixedGenerator("type: boot")
    config = InferenceConfig(attribute_vocabulary=("type",), tau_d=0.95)
    raw = infer_product(_record("p1", image), generator, _stub(), config, correct=False)
    assert raw.aspects.get("type").value == "boot"
    assert raw.trace[0].source == SOURCE_DECODER


def test_infer_batch_keeps_order_and_reports_failures(tmp_path):
    good = write_image_bundle(tmp_path, "a", "a red boot")
    records = [
        _record("p1", good),
        _record("p2", tmp_path / "missing.img"),
        _record("p3", good),
    ]
    config = InferenceConfig(attribute_vocabulary=())
    generator = _FixedGenerator("type: boot")
    for workers in (1, 3):
        results = infer_batch(records, generator, _stub(), config, workers=workers)
        assert [r.product_id for r in results] == ["p1", "p2", "p3"]
        assert results[0].error is None
        assert results[1].error is not None
        assert len(results[1].aspects) == 0
        assert results[2].aspects.get("type").value == "boot"
