import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aspectgen.core import (
    Aspect,
    AspectSet,
    DimensionMismatchError,
    EmbeddingVector,
    MalformedAspectError,
    ZeroVectorError,
    cosine_similarity,
    normalize_attribute,
    normalize_value,
    parse_all,
    parse_aspect,
    serialize_aspects,
)


def test_normalize_value_examples():
    assert normalize_value("Stainless  Steels") == "stainless steel"
    assert normalize_value("Dresses") == "dress"
    assert normalize_value("boots") == "boot"
    assert normalize_value("boxes") == "box"
    assert normalize_value("watches") == "watch"
    assert normalize_value("brushes") == "brush"
    assert normalize_value("glass") == "glass"
    assert normalize_value("dress") == "dress"


def test_normalize_value_short_tokens_keep_trailing_s():
    # "gas", "abs": too short for the bare-s rule.
    assert normalize_value("gas") == "gas"
    assert normalize_value("abs") == "abs"


def test_normalize_value_touches_only_last_token():
    assert normalize_value("sports shoes") == "sports shoe"
    assert normalize_value("glasses case") == "glasses case"


def test_normalize_value_keeps_hyphens():
    # Hyphen folding is an evaluation-time equivalence, not part of the
    # canonical form.
    assert normalize_value("Long-Sleeve") == "long-sleeve"


@given(st.text(max_size=60))
def test_normalize_value_idempotent(value):
    once = normalize_value(value)
    assert normalize_value(once) == once


@given(st.text(max_size=60))
def test_normalize_attribute_idempotent(value):
    once = normalize_attribute(value)
    assert normalize_attribute(once) == once


def test_aspect_rejects_bad_fields():
    with pytest.raises(MalformedAspectError):
        Aspect("", "boot")
    with pytest.raises(MalformedAspectError):
        Aspect("type", " boot")
    with pytest.raises(MalformedAspectError):
        Aspect("ty:pe", "boot")


def test_aspect_value_may_contain_colon():
    assert Aspect("ratio", "16:9").value == "16:9"


def test_aspect_set_replaces_value_in_place():
    aspects = AspectSet([Aspect("type", "boot"), Aspect("color", "red")])
    aspects.add(Aspect("Type", "sandal"))
    assert [a.value for a in aspects] == ["sandal", "red"]
    assert aspects.get("TYPE").value == "sandal"
    assert "color" in aspects
    assert len(aspects) == 2


def test_parse_aspect_lowercases_and_trims():
    aspect = parse_aspect("  Sleeve Style :  Long  Sleeve ")
    assert aspect.attribute == "sleeve style"
    assert aspect.value == "long sleeve"


def test_parse_aspect_splits_on_first_colon():
    aspect = parse_aspect("time: 12:30")
    assert aspect.value == "12:30"


def test_parse_aspect_malformed():
    for bad in ("no colon here", ":", "type:", ": boot"):
        with pytest.raises(MalformedAspectError):
            parse_aspect(bad)


def test_serialize_parse_round_trip():
    aspects = AspectSet([Aspect("type", "boot"), Aspect("color", "navy blue")])
    text = serialize_aspects(aspects)
    assert text == "type: boot; color: navy blue"
    assert parse_all(text) == aspects


def test_parse_all_empty_string():
    assert len(parse_all("   ")) == 0


_token = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Nd")), min_size=1, max_size=8
)


@given(st.lists(st.tuples(_token, _token), min_size=1, max_size=5))
def test_round_trip_property(pairs):
    aspects = AspectSet(Aspect(a, v) for a, v in pairs)
    assert parse_all(serialize_aspects(aspects)) == aspects


def test_embedding_vector_validation():
    vec = EmbeddingVector(np.array([1.0, 2.0]))
    assert vec.dim == 2
    with pytest.raises(ValueError):
        vec.values[0] = 5.0
    with pytest.raises(ValueError):
        EmbeddingVector(np.array([[1.0, 2.0]]))
    with pytest.raises(ValueError):
        EmbeddingVector(np.array([1.0, float("nan")]))
    with pytest.raises(ValueError):
        EmbeddingVector(np.array([]))


def test_cosine_similarity_known_value():
    a = EmbeddingVector(np.array([1.0, 1.0]))
    b = EmbeddingVector(np.array([1.0, 0.0]))
    assert cosine_similarity(a, b) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


def test_cosine_similarity_bounds_and_errors():
    a = EmbeddingVector(np.array([1.0, 0.0]))
    assert cosine_similarity(a, a) == 1.0
    assert cosine_similarity(a, EmbeddingVector(np.array([0.0, 3.0]))) == 0.0
    assert cosine_similarity(a, EmbeddingVector(np.array([-2.0, 0.0]))) == -1.0
    with pytest.raises(DimensionMismatchError):
        cosine_similarity(a, EmbeddingVector(np.array([1.0, 0.0, 0.0])))
    with pytest.raises(ZeroVectorError):
        cosine_similarity(a, EmbeddingVector(np.array([0.0, 0.0])))


@given(
    st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    st.lists(st.floats(-100, 100), min_size=3, max_size=3),
)
def test_cosine_similarity_symmetric_and_clamped(xs, ys):
    ax, ay = np.array(xs), np.array(ys)
    if np.linalg.norm(ax) == 0 or np.linalg.norm(ay) == 0:
        return
    a, b = EmbeddingVector(ax), EmbeddingVector(ay)
    lhs = cosine_similarity(a, b)
    assert lhs == cosine_similarity(b, a)
    assert -1.0 <= lhs <= 1.0
