"""Core value types and string/vector primitives shared by the whole pipeline.

An aspect is an (attribute, value) pair such as ("color", "red").  Products
carry ordered sets of aspects; the generation, correction, and evaluation
stages all traffic in the types defined here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


class AspectGenError(Exception):
    """Base class for errors raised by this package."""


class MalformedAspectError(AspectGenError):
    """Raised when an aspect string cannot be split into attribute and value."""


class DimensionMismatchError(AspectGenError):
    """Raised when two vectors of different dimension are combined."""


class ZeroVectorError(AspectGenError):
    """Raised when a zero-magnitude vector reaches a cosine computation."""


_WS_RE = re.compile(r"\s+")

# Trailing-plural stripping rules, tried in order; first hit wins.  Each row is
# (pattern, replacement, minimum token length).  The stem condition on the
# first rule is "ss" rather than bare "s" so that outputs are fixed points:
# "dresses" -> "dress" must survive a second pass unchanged.
_SINGULAR_RULES: tuple[tuple[re.Pattern[str], str, int], ...] = (
    (re.compile(r"(ss|x|z|ch|sh)es$"), r"\1", 0),
    (re.compile(r"(?<!s)s$"), "", 4),
)


def _collapse_ws(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def _singularize_token(token: str) -> str:
    for pattern, replacement, min_len in _SINGULAR_RULES:
        if len(token) >= min_len and pattern.search(token):
            return pattern.sub(replacement, token)
    return token


def normalize_value(value: str) -> str:
    """Canonicalize an aspect value for comparison and merging.

    Lowercases, collapses runs of whitespace, and strips a trailing plural
    from the final token ("boots" -> "boot", "dresses" -> "dress").  The
    function is idempotent: applying it to its own output changes nothing.
    """
    text = _collapse_ws(value.lower())
    if not text:
        return text
    tokens = text.split(" ")
    tokens[-1] = _singularize_token(tokens[-1])
    return " ".join(tokens)


def normalize_attribute(attribute: str) -> str:
    """Canonical attribute key: lowercased, whitespace collapsed."""
    return _collapse_ws(attribute.lower())


@dataclass(frozen=True)
class Aspect:
    """One attribute-value pair.

    Both fields must be non-empty with no leading or trailing whitespace;
    the attribute must not contain a colon (it would be unparseable once
    serialized).  Values may contain colons.
    """

    attribute: str
    value: str

    def __post_init__(self) -> None:
        for name in ("attribute", "value"):
            text = getattr(self, name)
            if not text:
                raise MalformedAspectError(f"aspect {name} is empty")
            if text != text.strip():
                raise MalformedAspectError(
                    f"aspect {name} has surrounding whitespace: {text!r}"
                )
        if ":" in self.attribute:
            raise MalformedAspectError(
                f"aspect attribute contains a colon: {self.attribute!r}"
            )

    def key(self) -> str:
        return normalize_attribute(self.attribute)


class AspectSet:
    """Ordered collection of aspects, at most one per normalized attribute.

    Adding an aspect whose attribute is already present replaces the stored
    value but keeps the original position, so serialization order is stable.
    """

    __slots__ = ("_items",)

    def __init__(self, aspects: Iterable[Aspect] = ()) -> None:
        self._items: dict[str, Aspect] = {}
        for aspect in aspects:
            self.add(aspect)

    def add(self, aspect: Aspect) -> None:
        self._items[aspect.key()] = aspect

    def get(self, attribute: str) -> Aspect | None:
        return self._items.get(normalize_attribute(attribute))

    def attributes(self) -> tuple[str, ...]:
        return tuple(self._items)

    def __contains__(self, attribute: str) -> bool:
        return normalize_attribute(attribute) in self._items

    def __iter__(self) -> Iterator[Aspect]:
        return iter(self._items.values())

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AspectSet):
            return NotImplemented
        return list(self) == list(other)

    def __repr__(self) -> str:
        return f"AspectSet({list(self._items.values())!r})"


def parse_aspect(text: str) -> Aspect:
    """Parse one "attribute: value" string.

    Splits on the first colon and lowercases and trims both sides, so values
    may themselves contain colons ("ratio: 16:9").  Raises
    MalformedAspectError when there is no colon or either side is empty.
    """
    head, sep, tail = text.partition(":")
    if not sep:
        raise MalformedAspectError(f"no colon in aspect string: {text!r}")
    attribute = _collapse_ws(head.lower())
    value = _collapse_ws(tail.lower())
    if not attribute or not value:
        raise MalformedAspectError(f"empty attribute or value in: {text!r}")
    return Aspect(attribute, value)


def parse_all(text: str) -> AspectSet:
    """Parse a "; "-joined aspect list as written by serialize_aspects."""
    result = AspectSet()
    stripped = text.strip()
    if not stripped:
        return result
    for fragment in stripped.split("; "):
        result.add(parse_aspect(fragment))
    return result


def serialize_aspects(aspects: Iterable[Aspect]) -> str:
    """Render aspects as "attr: value; attr: value".

    The "; " separator is reserved: a value containing it would not survive
    a parse round trip.
    """
    return "; ".join(f"{a.attribute}: {a.value}" for a in aspects)


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-length vector of finite reals in the shared embedding space."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between two embeddings, clamped to [-1, 1].

    Raises DimensionMismatchError on shape disagreement and ZeroVectorError
    when either argument has zero magnitude.
    """
    if a.dim != b.dim:
        raise DimensionMismatchError(f"dim {a.dim} vs {b.dim}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine undefined for a zero vector")
    cos = float(np.dot(a.values, b.values) / (na * nb))
    return max(-1.0, min(1.0, cos))
