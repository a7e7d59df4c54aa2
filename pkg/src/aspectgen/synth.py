"""Synthetic desk-scale corpus with stub image fixtures.

Builds a small product catalog whose "images" are stub sidecar bundles:
``X.img`` plus hidden description (``.txt``), OCR tokens (``.ocr.json``) and
a VQA oracle (``.vqa.json``).  The OCR and VQA evidence agrees with the gold
aspects (plus low-confidence distractor tokens), which is what lets the
correction stage demonstrate its value under embedding noise.
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path
from typing import Sequence

from .core import normalize_attribute, serialize_aspects
from .data import ProductRecord, load_corpus

FOOTWEAR_TYPES = ("boot", "sandal", "loafer", "sneaker", "clog")
BAG_TYPES = ("tote", "satchel", "clutch", "duffel")
COLORS = ("red", "navy", "olive", "black", "ivory", "teal")
BRANDS = ("corsair", "zenith", "maple", "orbit", "quartz")
MATERIALS = ("leather", "suede", "canvas", "wool", "rubber")

DISTRACTOR_TOKENS = (("sale", 0.3), ("blurry", 0.2))


def _write_image_bundle(
    image_path: Path,
    description: str,
    gold: Sequence[tuple[str, str]],
    include_distractors: bool = True,
) -> None:
    image_path.write_text(f"stub image {image_path.stem}\n", encoding="utf-8")
    Path(str(image_path) + ".txt").write_text(description + "\n", encoding="utf-8")
    ocr_entries: list[list[object]] = []
    for _, value in gold:
        for word in value.split():
            ocr_entries.append([word, 0.9])
    if include_distractors:
        ocr_entries.extend([list(pair) for pair in DISTRACTOR_TOKENS])
    Path(str(image_path) + ".ocr.json").write_text(
        json.dumps(ocr_entries) + "\n", encoding="utf-8"
    )
    vqa = {normalize_attribute(attr): value for attr, value in gold}
    Path(str(image_path) + ".vqa.json").write_text(
        json.dumps(vqa, sort_keys=True) + "\n", encoding="utf-8"
    )


def generate_corpus(
    root: str | Path,
    n_products: int = 50,
    seed: int = 0,
    include_distractors: bool = True,
) -> Path:
    """Write corpus.jsonl plus image bundles under root; return the corpus path."""
    root = Path(root)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    corpus_path = root / "corpus.jsonl"
    with corpus_path.open("w", encoding="utf-8") as handle:
        for i in range(n_products):
            product_id = f"p{i:04d}"
            if i % 2 == 0:
                category = "footwear"
                kind = rng.choice(FOOTWEAR_TYPES)
            else:
                category = "bags"
                kind = rng.choice(BAG_TYPES)
            color = rng.choice(COLORS)
            gold = [("type", kind), ("color", color)]
            if rng.random() < 0.5:
                gold.append(("brand", rng.choice(BRANDS)))
                description = f"a photo of a {color} {kind} from {gold[-1][1]}"
            else:
                gold.append(("material", rng.choice(MATERIALS)))
                description = f"a photo of a {color} {kind} made of {gold[-1][1]}"
            image_rel = f"images/{product_id}.img"
            _write_image_bundle(
                images / f"{product_id}.img", description, gold, include_distractors
            )
            row = {
                "id": product_id,
                "category": category,
                "image": image_rel,
                "title": f"{color} {kind}",
                "aspects": [
                    {"attribute": attr, "value": value} for attr, value in gold
                ],
            }
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    return corpus_path


def write_probe_images(
    records: Sequence[ProductRecord], out_dir: str | Path
) -> list[tuple[ProductRecord, str]]:
    """Probe fixtures whose hidden description equals each training text.

    With the zero-noise stub, encoding such a probe image is bit-identical to
    encoding the training text, so an overfit decoder should reproduce the
    aspects; OCR/VQA sidecars are copied from the source image so correction
    sees the same evidence.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probes = []
    for record in records:
        source = Path(record.image_ref)
        caption = Path(str(source) + ".txt").read_text(encoding="utf-8").rstrip("\n")
        training_text = serialize_aspects(record.gold_aspects) + " | " + caption
        probe = out / f"probe_{record.product_id}.img"
        probe.write_text(f"probe image {record.product_id}\n", encoding="utf-8")
        Path(str(probe) + ".txt").write_text(training_text + "\n", encoding="utf-8")
        for suffix in (".ocr.json", ".vqa.json"):
            sidecar = Path(str(source) + suffix)
            if sidecar.is_file():
                Path(str(probe) + suffix).write_bytes(sidecar.read_bytes())
        probes.append((record, str(probe)))
    return probes


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", help="directory to create the corpus in")
    parser.add_argument("--products", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    corpus = generate_corpus(args.out_dir, n_products=args.products, seed=args.seed)
    loaded = load_corpus(corpus)
    print(f"wrote {len(loaded.records)} products to {corpus}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
