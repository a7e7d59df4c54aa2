"""Corpus loading, aspect merging, and generalized zero-shot splitting.

The corpus format is JSONL, one product per line:

    {"id": "p1", "category": "shoes", "image": "images/p1.img",
     "title": "...", "aspects": [{"attribute": "color", "value": "red"}]}

Image references are resolved against the corpus file's directory; records
whose image cannot be found locally (including URL references, which are not
fetched at this scale) are dropped and counted rather than failing the load.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import (
    Aspect,
    AspectGenError,
    AspectSet,
    MalformedAspectError,
    normalize_attribute,
    normalize_value,
)

log = logging.getLogger(__name__)


class CorpusFormatError(AspectGenError):
    """Structurally invalid corpus line; message carries the line number."""


class InfeasibleSplitError(AspectGenError):
    """A category's aspect vocabulary is too small to reserve unseen aspects."""


class UnknownIdError(AspectGenError):
    """A split references a product id absent from the corpus."""


@dataclass(frozen=True)
class ProductRecord:
    """One catalog product with its gold aspects.

    Strings are kept as loaded (post trim) for display; comparisons elsewhere
    go through the normalize_* helpers.
    """

    product_id: str
    category: str
    image_ref: str
    title: str | None
    gold_aspects: AspectSet


@dataclass(frozen=True)
class LoadResult:
    records: tuple[ProductRecord, ...]
    dropped_missing_image: int = 0
    dropped_empty_aspects: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_missing_image + self.dropped_empty_aspects


def _resolve_image(image: str, base_dir: Path) -> str | None:
    """Absolute path of a resolvable local image ref, else None."""
    if not image:
        return None
    if image.startswith(("http://", "https://")):
        return None
    path = Path(image)
    if not path.is_absolute():
        path = base_dir / path
    return str(path.resolve()) if path.is_file() else None


def _parse_aspect_field(entry: object, line_no: int) -> Aspect:
    if not isinstance(entry, dict):
        raise CorpusFormatError(f"line {line_no}: aspect entry is not an object")
    attribute = entry.get("attribute")
    value = entry.get("value")
    if not isinstance(attribute, str) or not isinstance(value, str):
        raise CorpusFormatError(
            f"line {line_no}: aspect needs string attribute and value"
        )
    try:
        return Aspect(attribute.strip(), value.strip())
    except MalformedAspectError as exc:
        raise CorpusFormatError(f"line {line_no}: {exc}") from exc


def load_corpus(path: str | Path) -> LoadResult:
    """Load a JSONL corpus, preserving file order.

    Raises CorpusFormatError (with the 1-based line number) on structural
    problems: unparseable JSON, missing fields, duplicate ids, malformed
    aspects.  Records with unresolvable images or no usable aspects are
    dropped and counted instead.
    """
    corpus_path = Path(path)
    base_dir = corpus_path.resolve().parent
    records: list[ProductRecord] = []
    seen_ids: set[str] = set()
    dropped_image = 0
    dropped_aspects = 0
    with corpus_path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: invalid JSON: {exc}") from exc
            if not isinstance(row, dict):
                raise CorpusFormatError(f"line {line_no}: row is not an object")
            product_id = row.get("id")
            category = row.get("category")
            image = row.get("image")
            aspects_field = row.get("aspects")
            if not isinstance(product_id, str) or not product_id.strip():
                raise CorpusFormatError(f"line {line_no}: missing or empty id")
            if not isinstance(category, str) or not category.strip():
                raise CorpusFormatError(f"line {line_no}: missing or empty category")
            if product_id in seen_ids:
                raise CorpusFormatError(f"line {line_no}: duplicate id {product_id!r}")
            seen_ids.add(product_id)
            if not isinstance(aspects_field, list):
                raise CorpusFormatError(f"line {line_no}: aspects must be a list")
            title = row.get("title")
            if title is not None and not isinstance(title, str):
                raise CorpusFormatError(f"line {line_no}: title must be a string")
            resolved = _resolve_image(image if isinstance(image, str) else "", base_dir)
            if resolved is None:
                dropped_image += 1
                continue
            aspects = AspectSet(
                _parse_aspect_field(entry, line_no) for entry in aspects_field
            )
            if len(aspects) == 0:
                dropped_aspects += 1
                continue
            records.append(
                ProductRecord(
                    product_id=product_id.strip(),
                    category=category.strip(),
                    image_ref=resolved,
                    title=title,
                    gold_aspects=aspects,
                )
            )
    if dropped_image or dropped_aspects:
        log.info(
            "dropped %d records with unresolvable images and %d without aspects",
            dropped_image,
            dropped_aspects,
        )
    return LoadResult(tuple(records), dropped_image, dropped_aspects)


def write_corpus(records: Iterable[ProductRecord], path: str | Path) -> None:
    """Write records back out as JSONL with deterministic key order."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for record in records:
            row = {
                "id": record.product_id,
                "category": record.category,
                "image": record.image_ref,
                "title": record.title,
                "aspects": [
                    {"attribute": a.attribute, "value": a.value}
                    for a in record.gold_aspects
                ],
            }
            handle.write(json.dumps(row, sort_keys=True) + "\n")


class SynonymMap:
    """Value-level rewrite table: variant value -> canonical value.

    Entries are normalized on load; the table must be acyclic, meaning no
    canonical target may itself appear as a variant key, so applying the map
    twice equals applying it once.
    """

    def __init__(self, entries: Mapping[str, str] | None = None) -> None:
        table: dict[str, str] = {}
        for variant, canonical in (entries or {}).items():
            table[normalize_value(variant)] = normalize_value(canonical)
        for canonical in table.values():
            if canonical in table:
                raise ValueError(
                    f"synonym map is cyclic: canonical value {canonical!r} is also a variant"
                )
        self._table = table

    @classmethod
    def load(cls, path: str | Path) -> "SynonymMap":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("synonym map file must hold a JSON object")
        return cls(data)

    def apply(self, value: str) -> str:
        return self._table.get(value, value)

    def __len__(self) -> int:
        return len(self._table)


def merge_equivalent_aspects(
    records: Sequence[ProductRecord], synonym_map: SynonymMap | None = None
) -> tuple[ProductRecord, ...]:
    """Normalize every gold aspect and collapse the duplicates that creates.

    Values are normalize_value'd then rewritten through the synonym map;
    attributes are lowercased with whitespace collapsed.  Idempotent.
    """
    synonyms = synonym_map or SynonymMap()
    merged: list[ProductRecord] = []
    for record in records:
        aspects = AspectSet()
        for aspect in record.gold_aspects:
            value = synonyms.apply(normalize_value(aspect.value))
            aspects.add(Aspect(normalize_attribute(aspect.attribute), value))
        merged.append(
            ProductRecord(
                product_id=record.product_id,
                category=record.category,
                image_ref=record.image_ref,
                title=record.title,
                gold_aspects=aspects,
            )
        )
    return tuple(merged)


def aspect_key(aspect: Aspect) -> str:
    """Normalized 'attribute: value' string used for split bookkeeping."""
    return f"{normalize_attribute(aspect.attribute)}: {normalize_value(aspect.value)}"


@dataclass(frozen=True)
class ZeroShotSplit:
    """Generalized zero-shot partition of a corpus.

    Products carrying at least one unseen aspect land in val or test; train
    products carry none.  seen/unseen aspect vocabularies are disjoint.
    """

    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seen_aspects: frozenset[str]
    unseen_aspects: frozenset[str]
    seed: int
    unseen_fraction: float

    def to_json(self) -> str:
        payload = {
            "train_ids": sorted(self.train_ids),
            "val_ids": sorted(self.val_ids),
            "test_ids": sorted(self.test_ids),
            "seen_aspects": sorted(self.seen_aspects),
            "unseen_aspects": sorted(self.unseen_aspects),
            "seed": self.seed,
            "unseen_fraction": self.unseen_fraction,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ZeroShotSplit":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            train_ids=tuple(data["train_ids"]),
            val_ids=tuple(data["val_ids"]),
            test_ids=tuple(data["test_ids"]),
            seen_aspects=frozenset(data["seen_aspects"]),
            unseen_aspects=frozenset(data["unseen_aspects"]),
            seed=int(data["seed"]),
            unseen_fraction=float(data["unseen_fraction"]),
        )


def _stable_rng(seed: int, label: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{label}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _val_or_test(seed: int, product_id: str) -> str:
    digest = hashlib.sha256(f"{seed}|assign|{product_id}".encode("utf-8")).digest()
    # 1:2 val:test ratio.
    return "val" if int.from_bytes(digest[:8], "big") % 3 == 0 else "test"


def sample_zero_shot_split(
    records: Sequence[ProductRecord], unseen_fraction: float, seed: int
) -> ZeroShotSplit:
    """Designate unseen aspects per category and partition the products.

    A pure function of (records, unseen_fraction, seed).  Within each
    category, round(fraction * |vocabulary|) aspects are drawn as unseen;
    InfeasibleSplitError if that count is zero for any category.  A product
    with any unseen aspect goes to val or test (1:2 by seeded hash of its
    id); everything else trains.
    """
    if not 0.0 < unseen_fraction < 1.0:
        raise ValueError("unseen_fraction must lie strictly between 0 and 1")
    if not records:
        raise ValueError("cannot split an empty corpus")
    by_category: dict[str, set[str]] = {}
    for record in records:
        vocab = by_category.setdefault(record.category, set())
        for aspect in record.gold_aspects:
            vocab.add(aspect_key(aspect))
    unseen: set[str] = set()
    for category in sorted(by_category):
        vocab = sorted(by_category[category])
        count = round(unseen_fraction * len(vocab))
        if count == 0:
            raise InfeasibleSplitError(
                f"category {category!r} has {len(vocab)} aspects; "
                f"fraction {unseen_fraction} reserves none as unseen"
            )
        rng = _stable_rng(seed, f"category|{category}")
        unseen.update(rng.sample(vocab, count))
    all_aspects = set().union(*by_category.values())
    seen = all_aspects - unseen
    train_ids: list[str] = []
    val_ids: list[str] = []
    test_ids: list[str] = []
    for record in records:
        keys = {aspect_key(a) for a in record.gold_aspects}
        if keys & unseen:
            if _val_or_test(seed, record.product_id) == "val":
                val_ids.append(record.product_id)
            else:
                test_ids.append(record.product_id)
        else:
            train_ids.append(record.product_id)
    return ZeroShotSplit(
        train_ids=tuple(train_ids),
        val_ids=tuple(val_ids),
        test_ids=tuple(test_ids),
        seen_aspects=frozenset(seen),
        unseen_aspects=frozenset(unseen),
        seed=seed,
        unseen_fraction=unseen_fraction,
    )


@dataclass(frozen=True)
class SplitCheck:
    name: str
    passed: bool
    offenders: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[SplitCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def summary(self) -> str:
        lines = []
        for check in self.checks:
            status = "ok" if check.passed else "FAIL"
            suffix = ""
            if check.offenders:
                shown = ", ".join(check.offenders[:5])
                more = len(check.offenders) - 5
                suffix = f" ({shown}{' ...' if more > 0 else ''})"
            lines.append(f"{status:4s} {check.name}{suffix}")
        return "\n".join(lines)


def validate_split(
    split: ZeroShotSplit, records: Sequence[ProductRecord]
) -> ValidationReport:
    """Check the three zero-shot invariants against a corpus.

    Raises UnknownIdError when the split names ids missing from the corpus;
    invariant violations are reported, not raised.
    """
    by_id = {record.product_id: record for record in records}
    split_ids = [*split.train_ids, *split.val_ids, *split.test_ids]
    unknown = sorted(pid for pid in split_ids if pid not in by_id)
    if unknown:
        raise UnknownIdError(f"split references unknown ids: {unknown[:5]}")

    disjoint = not (split.seen_aspects & split.unseen_aspects)
    checks = [
        SplitCheck(
            "seen and unseen aspect vocabularies are disjoint",
            disjoint,
            tuple(sorted(split.seen_aspects & split.unseen_aspects)[:20]),
        )
    ]

    leaky_train = []
    for pid in split.train_ids:
        keys = {aspect_key(a) for a in by_id[pid].gold_aspects}
        if keys & split.unseen_aspects:
            leaky_train.append(pid)
    checks.append(
        SplitCheck(
            "no train product carries an unseen aspect",
            not leaky_train,
            tuple(leaky_train),
        )
    )

    missing_unseen = []
    for pid in [*split.val_ids, *split.test_ids]:
        keys = {aspect_key(a) for a in by_id[pid].gold_aspects}
        if not keys & split.unseen_aspects:
            missing_unseen.append(pid)
    checks.append(
        SplitCheck(
            "every val/test product carries an unseen aspect",
            not missing_unseen,
            tuple(missing_unseen),
        )
    )

    ids_in_split = set(split_ids)
    overlap = (
        (set(split.train_ids) & set(split.val_ids))
        | (set(split.train_ids) & set(split.test_ids))
        | (set(split.val_ids) & set(split.test_ids))
    )
    missing = sorted(set(by_id) - ids_in_split)
    checks.append(
        SplitCheck(
            "partitions cover the corpus exactly once",
            not overlap and not missing,
            tuple(sorted(overlap) + missing),
        )
    )
    return ValidationReport(tuple(checks))


def collect_attribute_vocabulary(records: Sequence[ProductRecord]) -> tuple[str, ...]:
    """Sorted attribute names occurring in the given records."""
    names = {normalize_attribute(a.attribute) for r in records for a in r.gold_aspects}
    return tuple(sorted(names))
