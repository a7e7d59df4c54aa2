"""Shared fixtures: tiny on-disk corpora with stub image bundles."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from aspectgen.core import Aspect


def write_image_bundle(
    directory: Path,
    name: str,
    description: str,
    ocr: list[tuple[str, float]] | None = None,
    vqa: dict[str, str] | None = None,
) -> Path:
    """One fake image plus the sidecars the stub adapters read."""
    directory.mkdir(parents=True, exist_ok=True)
    image = directory / f"{name}.img"
    image.write_text(f"binary stand-in for {name}\n", encoding="utf-8")
    (directory / f"{name}.img.txt").write_text(description + "\n", encoding="utf-8")
    if ocr is not None:
        (directory / f"{name}.img.ocr.json").write_text(
            json.dumps([[text, conf] for text, conf in ocr]), encoding="utf-8"
        )
    if vqa is not None:
        (directory / f"{name}.img.vqa.json").write_text(
            json.dumps(vqa), encoding="utf-8"
        )
    return image


def corpus_line(
    product_id: str,
    category: str,
    image: str,
    aspects: list[tuple[str, str]],
    title: str = "",
) -> str:
    return json.dumps(
        {
            "id": product_id,
            "category": category,
            "image": image,
            "title": title or f"item {product_id}",
            "aspects": [{"attribute": a, "value": v} for a, v in aspects],
        }
    )


def aspect_list(pairs: list[tuple[str, str]]) -> list[Aspect]:
    return [Aspect(attribute, value) for attribute, value in pairs]


@pytest.fixture
def small_corpus(tmp_path: Path) -> Path:
    """Three products, one of them pointing at a missing image file."""
    images = tmp_path / "images"
    write_image_bundle(
        images,
        "a",
        "a photo of a red boot",
        ocr=[("corsair", 0.9), ("sale", 0.3)],
        vqa={"color": "red", "type": "boot"},
    )
    write_image_bundle(images, "b", "a photo of a navy tote", vqa={"color": "navy"})
    path = tmp_path / "corpus.jsonl"
    lines = [
        corpus_line("p1", "shoes", "images/a.img", [("type", "boot"), ("color", "red")]),
        corpus_line("p2", "bags", "images/b.img", [("type", "tote"), ("color", "navy")]),
        corpus_line("p3", "shoes", "images/missing.img", [("type", "clog")]),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
