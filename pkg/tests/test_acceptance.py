"""Acceptance suite: seven end-to-end checks over the whole pipeline.

Each test prints one `[acceptance] N <name>: PASS` line (visible even under
output capture) so a full test log shows the criteria at a glance.  Budgets
are wall-clock seconds; checks with no stated budget print the time only.
"""

import dataclasses
import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from aspectgen.adapters import AdapterConfig, OcrToken, StubAdapters, build_adapters, filter_ocr_tokens
from aspectgen.cli import EXIT_OK
from aspectgen.cli import main as cli_main
from aspectgen.core import (
    Aspect,
    AspectSet,
    EmbeddingVector,
    cosine_similarity,
    serialize_aspects,
)
from aspectgen.data import ProductRecord, aspect_key, load_corpus, sample_zero_shot_split
from aspectgen.evaluation import accuracy80, aspect_match_score, compute_report
from aspectgen.inference import InferenceConfig, correct_aspects, infer_product
from aspectgen.synth import generate_corpus, write_probe_images
from aspectgen.training import (
    GreedyGenerator,
    Projector,
    TrainConfig,
    build_training_text,
    project,
    reconstruct,
    train_decoder,
)

FIXTURE = Path(__file__).parent / "fixtures" / "metric_cases.json"

# Desk-scale training configuration: smaller batches and a higher rate than
# the published defaults so 50 products still see enough optimizer steps.
DESK_TRAIN = TrainConfig(
    learning_rate=0.004,
    batch_size=8,
    max_epochs=120,
    early_stop_patience=0,
    decoder_dim=64,
    hidden_size=256,
    seed=0,
)


class _Clock:
    def __init__(self):
        self.started = time.monotonic()
        self.extra = 0.0

    @property
    def elapsed(self):
        return time.monotonic() - self.started + self.extra


def _announce(capsys, number, name, clock, budget=None):
    elapsed = clock.elapsed
    within = budget is None or elapsed < budget
    note = f"{elapsed:.1f}s" + (f", budget {budget:.0f}s" if budget else "")
    with capsys.disabled():
        print(f"[acceptance] {number} {name}: {'PASS' if within else 'FAIL'} ({note})")
    assert within, f"criterion {number} exceeded its budget: {note}"


# -- 1. metric fixture --------------------------------------------------------


def test_acceptance_1_metric_fixture(capsys):
    clock = _Clock()

    boot = Aspect("type", "boot")
    for variant in ("bootie", "booty"):
        assert aspect_match_score(boot, Aspect("type", variant)) >= 0.8
    sleeve = Aspect("sleeve style", "long sleeve")
    for variant in ("long-sleeve", "long sleeve length"):
        assert aspect_match_score(sleeve, Aspect("sleeve style", variant)) >= 0.8

    data = json.loads(FIXTURE.read_text(encoding="utf-8"))
    golds = {c["id"]: [Aspect(a, v) for a, v in c["gold"]] for c in data["cases"]}
    preds = {c["id"]: [Aspect(a, v) for a, v in c["predicted"]] for c in data["cases"]}
    report = compute_report(preds, golds)
    expected = data["expected"]
    for key in ("acc80", "micro_f1", "macro_f1", "rouge1"):
        assert round(getattr(report, key), 4) == round(expected[key], 4), key

    _announce(capsys, 1, "metric fixture", clock, budget=5.0)


# -- 2. correction vs brute-force oracle --------------------------------------


def _oracle_correct(decoded, prompted, tokens, config, adapters):
    """Independent restatement of the correction rule on raw cosines."""

    def cos(a, b):
        try:
            return cosine_similarity(adapters.encode_text(a), adapters.encode_text(b))
        except Exception:
            return float("-inf")

    pool = [t.text for t in tokens]
    pool += [f"{tokens[i].text} {tokens[i + 1].text}" for i in range(len(tokens) - 1)]
    out = []
    for aspect in decoded:
        answer = prompted.get(aspect.attribute)
        if answer is not None:
            if cos(aspect.value, answer.value) > config.tau_d:
                out.append((aspect.attribute, answer.value))
                continue
            candidates = [answer.value] + pool
        else:
            candidates = list(pool)
        if not candidates:
            out.append((aspect.attribute, aspect.value))
            continue
        out.append((aspect.attribute, max(candidates, key=lambda v: cos(aspect.value, v))))
    return out


_ORACLE_WORDS = (
    "red navy olive black ivory teal boot sandal loafer sneaker clog tote "
    "satchel clutch corsair zenith maple orbit quartz leather suede canvas "
    "wool rubber xl cotton steel stainless gaming pro"
).split()


def test_acceptance_2_correction_oracle(capsys):
    clock = _Clock()
    adapters = StubAdapters(embedding_dim=64)
    rng = random.Random(20240817)
    attrs = ["type", "color", "brand", "material", "size", "style"]
    mismatches = 0
    for trial in range(1100):
        tau_d = rng.choice([0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0, rng.random()])
        decoded = AspectSet(
            Aspect(a, " ".join(rng.sample(_ORACLE_WORDS, rng.randint(1, 2))))
            for a in rng.sample(attrs, rng.randint(1, 3))
        )
        vocab = tuple(a.attribute for a in decoded if rng.random() < 0.6)
        prompted = AspectSet(
            Aspect(a, " ".join(rng.sample(_ORACLE_WORDS, rng.randint(1, 2))))
            for a in vocab
            if rng.random() < 0.8
        )
        tokens = tuple(
            OcrToken(rng.choice(_ORACLE_WORDS), round(rng.uniform(0.05, 0.99), 2))
            for _ in range(rng.randint(0, 5))
        )
        config = InferenceConfig(attribute_vocabulary=vocab, tau_d=tau_d)
        corrected, trace = correct_aspects(decoded, prompted, tokens, config, adapters)
        got = [(a.attribute, a.value) for a in corrected]
        want = _oracle_correct(decoded, prompted, tokens, config, adapters)
        if got != want:
            mismatches += 1
        assert len(trace) == len(decoded)
    assert mismatches == 0

    # Boundary behavior of the decision threshold.
    decoded = AspectSet([Aspect("color", "red")])
    prompted = AspectSet([Aspect("color", "red")])
    stub = StubAdapters(embedding_dim=64)
    zero = InferenceConfig(attribute_vocabulary=("color",), tau_d=0.0)
    _, trace = correct_aspects(decoded, prompted, (), zero, stub)
    assert trace[0].candidates == ()  # similarity 1.0 > 0: direct replacement
    one = InferenceConfig(attribute_vocabulary=("color",), tau_d=1.0)
    _, trace = correct_aspects(decoded, prompted, (), one, stub)
    assert trace[0].candidates != ()  # 1.0 > 1.0 is false: pool search

    # Boundary behavior of the confidence filter (strictly greater).
    entries = [("zero", 0.0), ("low", 0.4), ("high", 1.0)]
    assert [t.text for t in filter_ocr_tokens(entries, 0.0)] == ["low", "high"]
    assert [t.text for t in filter_ocr_tokens(entries, 1.0)] == []

    _announce(capsys, 2, "correction oracle (1100 instances)", clock, budget=30.0)


# -- 3. split sampler invariants -----------------------------------------------


def _random_records(rng, index):
    kinds = ("boot", "sandal", "loafer", "tote", "clutch", "satchel", "clog")
    colors = ("red", "navy", "olive", "teal", "ivory", "black")
    records = []
    for i in range(rng.randint(8, 40)):
        pairs = [("type", rng.choice(kinds)), ("color", rng.choice(colors))]
        if rng.random() < 0.4:
            pairs.append(("brand", rng.choice(("corsair", "zenith", "maple"))))
        records.append(
            ProductRecord(
                product_id=f"c{index:03d}-p{i:03d}",
                category=rng.choice(("shoes", "bags", "kitchen")),
                image_ref=f"/img/c{index:03d}-p{i:03d}.img",
                title=None,
                gold_aspects=AspectSet(Aspect(a, v) for a, v in pairs),
            )
        )
    return records


def test_acceptance_3_split_invariants(capsys):
    clock = _Clock()
    rng = random.Random(99)
    checked = attempts = 0
    while checked < 110 and attempts < 500:
        attempts += 1
        records = _random_records(rng, attempts)
        seed = rng.randint(0, 10_000)
        try:
            split = sample_zero_shot_split(records, 0.2, seed)
        except Exception:
            continue  # infeasible draw; the sampler refused, which is correct
        checked += 1
        by_id = {r.product_id: r for r in records}

        def keys(pid):
            return {aspect_key(a) for a in by_id[pid].gold_aspects}

        assert not (split.seen_aspects & split.unseen_aspects)
        for pid in split.train_ids:
            assert not (keys(pid) & split.unseen_aspects), pid
        for pid in (*split.val_ids, *split.test_ids):
            assert keys(pid) & split.unseen_aspects, pid
        together = [*split.train_ids, *split.val_ids, *split.test_ids]
        assert sorted(together) == sorted(by_id)
        if checked % 10 == 0:
            assert sample_zero_shot_split(records, 0.2, seed) == split
    assert checked >= 100, f"only {checked} feasible corpora"
    _announce(capsys, 3, f"split invariants ({checked} corpora)", clock, budget=60.0)


# -- 4 & 5. desk-scale training and cross-modal transfer -----------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk-corpus")
    generate_corpus(root, n_products=50, seed=0)
    records = load_corpus(root / "corpus.jsonl").records
    adapters = build_adapters(AdapterConfig(kind="stub", embedding_dim=64))
    started = time.monotonic()
    first = train_decoder(records, records, adapters, DESK_TRAIN)
    second = train_decoder(records, records, adapters, DESK_TRAIN)
    return {
        "root": root,
        "records": records,
        "adapters": adapters,
        "first": first,
        "second": second,
        "train_wall": time.monotonic() - started,
    }


def test_acceptance_4_training_sanity(desk, capsys):
    clock = _Clock()
    clock.extra = desk["train_wall"]
    first, second = desk["first"], desk["second"]
    records, adapters = desk["records"], desk["adapters"]

    assert first.history[-1].train_loss < 0.5 * first.history[0].train_loss
    assert [e.train_loss for e in first.history] == [
        e.train_loss for e in second.history
    ]
    assert [e.val_loss for e in first.history] == [e.val_loss for e in second.history]

    exact = 0
    for record in records:
        text = build_training_text(record, adapters.caption(record.image_ref))
        want = serialize_aspects(record.gold_aspects)
        if reconstruct(text, first.checkpoint, adapters) == want:
            exact += 1
    ratio = exact / len(records)
    assert ratio >= 0.9, f"reconstructed {exact}/{len(records)}"
    _announce(
        capsys,
        4,
        f"training sanity ({exact}/{len(records)} exact)",
        clock,
        budget=300.0,
    )


def test_acceptance_5_cross_modal_transfer(desk, capsys):
    clock = _Clock()
    records = desk["records"]
    generator = GreedyGenerator(desk["first"].checkpoint)
    probes = write_probe_images(records, desk["root"] / "probes")
    probe_records = [dataclasses.replace(r, image_ref=p) for r, p in probes]
    vocab = tuple(
        sorted({a.attribute for r in records for a in r.gold_aspects})
    )
    config = InferenceConfig(attribute_vocabulary=vocab)

    clean = build_adapters(AdapterConfig(kind="stub", embedding_dim=64, noise=0.0))
    total = hits = 0
    for record in probe_records:
        result = infer_product(record, generator, clean, config)
        got = {(a.attribute, a.value) for a in result.aspects}
        want = {(a.attribute, a.value) for a in record.gold_aspects}
        total += len(want)
        hits += len(got & want)
    recovery = hits / total
    assert recovery >= 0.9, f"recovered {hits}/{total} aspects at noise 0"

    noisy = build_adapters(AdapterConfig(kind="stub", embedding_dim=64, noise=0.1))
    golds = {r.product_id: list(r.gold_aspects) for r in probe_records}
    uncorrected = {}
    corrected = {}
    for record in probe_records:
        uncorrected[record.product_id] = list(
            infer_product(record, generator, noisy, config, correct=False).aspects
        )
        corrected[record.product_id] = list(
            infer_product(record, generator, noisy, config, correct=True).aspects
        )
    acc_plain = accuracy80(uncorrected, golds)
    acc_fixed = accuracy80(corrected, golds)
    assert acc_fixed >= acc_plain, f"{acc_fixed:.4f} < {acc_plain:.4f}"
    _announce(
        capsys,
        5,
        f"cross-modal transfer ({recovery:.0%} exact; acc80 {acc_fixed:.3f} >= {acc_plain:.3f})",
        clock,
    )


# -- 6. projector affine correctness -------------------------------------------


def test_acceptance_6_projector_affine(capsys):
    clock = _Clock()
    rng = np.random.default_rng(4242)
    prefix_len, decoder_dim, embedding_dim = 10, 32, 48
    out_dim = prefix_len * decoder_dim
    projector = Projector(
        weight=rng.standard_normal((out_dim, embedding_dim)).astype(np.float32),
        bias=rng.standard_normal(out_dim).astype(np.float32),
        prefix_len=prefix_len,
    )
    weight64 = projector.weight.astype(np.float64)
    bias64 = projector.bias.astype(np.float64)
    inputs = [rng.standard_normal(embedding_dim) for _ in range(100)]

    worst_oracle = 0.0
    for x in inputs:
        got = project(EmbeddingVector(x), projector).reshape(-1)
        oracle = np.array(
            [
                math.fsum(weight64[row][col] * x[col] for col in range(embedding_dim))
                + bias64[row]
                for row in range(out_dim)
            ]
        )
        worst_oracle = max(worst_oracle, float(np.max(np.abs(got - oracle))))
    assert worst_oracle <= 1e-6

    offset = project(EmbeddingVector(np.zeros(embedding_dim)), projector)
    worst_super = 0.0
    for x, y in zip(inputs[:50], inputs[50:]):
        alpha, beta = float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2))
        mixed = project(EmbeddingVector(alpha * x + beta * y), projector)
        recombined = (
            alpha * project(EmbeddingVector(x), projector)
            + beta * project(EmbeddingVector(y), projector)
            + (1.0 - alpha - beta) * offset
        )
        worst_super = max(worst_super, float(np.max(np.abs(mixed - recombined))))
    assert worst_super <= 1e-6

    _announce(
        capsys,
        6,
        f"projector affine (oracle {worst_oracle:.1e}, superposition {worst_super:.1e})",
        clock,
    )


# -- 7. full pipeline smoke -----------------------------------------------------


def test_acceptance_7_pipeline_smoke(tmp_path, capsys):
    clock = _Clock()
    generate_corpus(tmp_path, n_products=16, seed=0)
    config = {
        "corpus": "corpus.jsonl",
        "split": {"unseen_fraction": 0.2, "seed": 0},
        "adapters": {"kind": "stub", "embedding_dim": 48},
        "train": {
            "learning_rate": 0.004,
            "batch_size": 4,
            "max_epochs": 15,
            "early_stop_patience": 0,
            "decoder_dim": 32,
            "hidden_size": 64,
            "seed": 0,
        },
    }
    config_path = tmp_path / "pipeline.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")

    def run_all(out_dir):
        for argv in (
            ["prepare"],
            ["split"],
            ["train"],
            ["infer", "--partition", "test"],
            ["evaluate", "--partition", "test"],
        ):
            code = cli_main(
                [*argv, "--config", str(config_path), "--output-dir", str(out_dir)]
            )
            assert code == EXIT_OK, argv

    run_all(tmp_path / "run1")
    capsys.readouterr()
    run_all(tmp_path / "run2")
    capsys.readouterr()

    report = json.loads((tmp_path / "run1" / "report.test.json").read_text())
    for key in ("acc80", "micro_f1", "macro_f1", "rouge1"):
        assert key in report["overall"]

    # The training log is a diagnostic (it records wall time); every actual
    # output of the pipeline must be byte-identical across the two runs.
    artifacts = (
        "corpus.normalized.jsonl",
        "split.json",
        "model.ckpt",
        "predictions.test.jsonl",
        "report.test.json",
    )
    for name in artifacts:
        a = (tmp_path / "run1" / name).read_bytes()
        b = (tmp_path / "run2" / name).read_bytes()
        assert a == b, f"{name} differs between reruns"

    _announce(capsys, 7, "pipeline smoke (rerun byte-identical)", clock)
