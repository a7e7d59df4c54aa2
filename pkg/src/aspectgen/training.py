"""Text-only training of the prefix projector and aspect decoder.

No image ever enters training.  Each product contributes one training text,
``serialize_aspects(gold) + " | " + caption``; the frozen text encoder embeds
it, the projector maps the embedding to prefix slots, and the decoder learns
to emit the aspect string.  The caption tail widens the encoder input toward
what image embeddings look like, but the loss covers aspect tokens only.
Because the dual encoder puts images and texts in one space, the trained
decoder can be fed image embeddings at inference time unchanged.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import random
import threading
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .adapters import AdapterSuite
from .core import (
    AspectGenError,
    DimensionMismatchError,
    EmbeddingVector,
    serialize_aspects,
)
from .data import ProductRecord
from .decoder import (
    EOS_ID,
    PAD_ID,
    CharTokenizer,
    PrefixCharDecoder,
    load_numpy_state,
    state_to_numpy,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "aspectgen-checkpoint-v1"


class EmptyAspectsError(AspectGenError):
    """A training record carries no gold aspects."""


class CaptionMissingError(AspectGenError):
    """A training record's caption is empty."""


class NonFiniteLossError(AspectGenError):
    """Training or validation loss left the finite range."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for projector + decoder training.

    The published defaults are kept: learning rate 0.0005, batch size 512,
    AdamW, early stopping.  Desk-scale runs usually shrink the batch and
    raise the rate so the tiny corpus still gets enough optimizer steps.
    """

    learning_rate: float = 0.0005
    batch_size: int = 512
    max_epochs: int = 30
    early_stop_patience: int = 3
    prefix_len: int = 10
    optimizer: str = "adamw"
    seed: int = 0
    decoder_dim: int = 64
    hidden_size: int = 128
    max_target_len: int = 160
    embedding_noise: float = 0.0
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if min(self.batch_size, self.max_epochs, self.prefix_len) < 1:
            raise ValueError("batch_size, max_epochs, prefix_len must be >= 1")
        if min(self.decoder_dim, self.hidden_size, self.max_target_len) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer: {self.optimizer!r}")
        if self.embedding_noise < 0:
            raise ValueError("embedding_noise must be >= 0")

    def digest(self) -> str:
        """Hash of every field that shapes the trained parameters.

        max_epochs and the early-stop patience are stopping rules, not
        training dynamics, so they stay out: a resumed run may extend them.
        """
        payload = asdict(self)
        payload.pop("max_epochs")
        payload.pop("early_stop_patience")
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()


@dataclass(frozen=True)
class Projector:
    """Affine map from the shared space to prefix_len * decoder_dim slots."""

    weight: np.ndarray = field(repr=False)  # [prefix_len * decoder_dim, embedding_dim]
    bias: np.ndarray = field(repr=False)  # [prefix_len * decoder_dim]
    prefix_len: int

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("projector weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("projector weight and bias disagree on output size")
        if self.prefix_len < 1 or self.weight.shape[0] % self.prefix_len != 0:
            raise ValueError("projector output size must be divisible by prefix_len")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("projector parameters must be finite")

    @property
    def decoder_dim(self) -> int:
        return self.weight.shape[0] // self.prefix_len

    @property
    def embedding_dim(self) -> int:
        return self.weight.shape[1]


def project(embedding: EmbeddingVector, projector: Projector) -> np.ndarray:
    """Apply the affine map and reshape to [prefix_len, decoder_dim].

    Computed in float64; the map is exactly affine, so superposition holds to
    float tolerance.
    """
    if embedding.dim != projector.embedding_dim:
        raise DimensionMismatchError(
            f"embedding dim {embedding.dim} vs projector input {projector.embedding_dim}"
        )
    flat = projector.weight.astype(np.float64) @ embedding.values + projector.bias.astype(
        np.float64
    )
    return flat.reshape(projector.prefix_len, projector.decoder_dim)


def build_training_text(record: ProductRecord, caption: str) -> str:
    """Serialized gold aspects, a ' | ' separator, then the caption."""
    if len(record.gold_aspects) == 0:
        raise EmptyAspectsError(f"record {record.product_id} has no aspects")
    caption = caption.strip()
    if not caption:
        raise CaptionMissingError(f"record {record.product_id} has no caption")
    return serialize_aspects(record.gold_aspects) + " | " + caption


def target_token_ids(record: ProductRecord, tokenizer: CharTokenizer, max_len: int) -> list[int]:
    """Decoder target ids: the aspect string only, EOS-terminated.

    The caption never appears here, which is what restricts the loss to
    aspect tokens.
    """
    ids = tokenizer.encode(serialize_aspects(record.gold_aspects))
    ids = ids[: max_len - 1]
    return ids + [EOS_ID]


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_seconds: float


@dataclass(frozen=True)
class DecoderCheckpoint:
    """Trained parameters plus everything needed to rebuild the decoder."""

    projector: Projector
    decoder_state: dict[str, np.ndarray] = field(repr=False)
    tokenizer_id: str
    config_digest: str
    epoch: int
    val_loss: float
    hidden_size: int
    vocab_size: int
    max_target_len: int

    def save(self, path: str | Path) -> None:
        """Write the checkpoint archive atomically (temp file then rename).

        Zip entries are sorted and carry a fixed timestamp; every parameter
        is stored as row-major little-endian float32 with its shape recorded
        in the JSON header, so identical checkpoints are byte-identical.
        """
        arrays: dict[str, np.ndarray] = {
            "projector/weight": self.projector.weight,
            "projector/bias": self.projector.bias,
        }
        for name, arr in self.decoder_state.items():
            arrays[f"decoder/{name}"] = arr
        meta = {
            "format": CHECKPOINT_FORMAT,
            "tokenizer_id": self.tokenizer_id,
            "config_digest": self.config_digest,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "embedding_dim": self.projector.embedding_dim,
            "prefix_len": self.projector.prefix_len,
            "decoder_dim": self.projector.decoder_dim,
            "hidden_size": self.hidden_size,
            "vocab_size": self.vocab_size,
            "max_target_len": self.max_target_len,
            "shapes": {name: list(arr.shape) for name, arr in arrays.items()},
        }
        target = Path(path)
        tmp = target.with_name(target.name + ".tmp")
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w", zipfile.ZIP_DEFLATED) as archive:
            entries = [("meta.json", json.dumps(meta, sort_keys=True, indent=2).encode("utf-8"))]
            for name in sorted(arrays):
                blob = arrays[name].astype("<f4").tobytes(order="C")
                entries.append((name + ".bin", blob))
            for name, payload in entries:
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                archive.writestr(info, payload)
        tmp.write_bytes(buffer.getvalue())
        os.replace(tmp, target)

    @classmethod
    def load(cls, path: str | Path) -> "DecoderCheckpoint":
        with zipfile.ZipFile(Path(path)) as archive:
            meta = json.loads(archive.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"not a recognized checkpoint: {path}")
            arrays: dict[str, np.ndarray] = {}
            for name, shape in meta["shapes"].items():
                blob = archive.read(name + ".bin")
                arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        projector = Projector(
            weight=arrays.pop("projector/weight"),
            bias=arrays.pop("projector/bias"),
            prefix_len=int(meta["prefix_len"]),
        )
        decoder_state = {
            name.removeprefix("decoder/"): arr for name, arr in arrays.items()
        }
        return cls(
            projector=projector,
            decoder_state=decoder_state,
            tokenizer_id=meta["tokenizer_id"],
            config_digest=meta["config_digest"],
            epoch=int(meta["epoch"]),
            val_loss=float(meta["val_loss"]),
            hidden_size=int(meta["hidden_size"]),
            vocab_size=int(meta["vocab_size"]),
            max_target_len=int(meta["max_target_len"]),
        )


@dataclass(frozen=True)
class TrainResult:
    checkpoint: DecoderCheckpoint
    history: tuple[EpochStats, ...]


def _module_from_checkpoint(checkpoint: DecoderCheckpoint) -> PrefixCharDecoder:
    module = PrefixCharDecoder(
        embedding_dim=checkpoint.projector.embedding_dim,
        prefix_len=checkpoint.projector.prefix_len,
        decoder_dim=checkpoint.projector.decoder_dim,
        hidden_size=checkpoint.hidden_size,
        vocab_size=checkpoint.vocab_size,
    )
    state = {
        "projector.weight": checkpoint.projector.weight,
        "projector.bias": checkpoint.projector.bias,
    }
    state.update(checkpoint.decoder_state)
    load_numpy_state(module, state)
    return module


def _checkpoint_from_module(
    module: PrefixCharDecoder,
    config: TrainConfig,
    epoch: int,
    val_loss: float,
) -> DecoderCheckpoint:
    state = state_to_numpy(module)
    projector = Projector(
        weight=state.pop("projector.weight"),
        bias=state.pop("projector.bias"),
        prefix_len=config.prefix_len,
    )
    return DecoderCheckpoint(
        projector=projector,
        decoder_state=state,
        tokenizer_id=CharTokenizer.tokenizer_id,
        config_digest=config.digest(),
        epoch=epoch,
        val_loss=val_loss,
        hidden_size=module.hidden_size,
        vocab_size=module.vocab_size,
        max_target_len=config.max_target_len,
    )


def _encode_dataset(
    records: Sequence[ProductRecord],
    adapters: AdapterSuite,
    tokenizer: CharTokenizer,
    max_target_len: int,
) -> tuple[torch.Tensor, list[list[int]]]:
    rows = []
    targets = []
    for record in records:
        caption = adapters.caption(record.image_ref)
        text = build_training_text(record, caption)
        rows.append(adapters.encode_text(text).values.astype(np.float32))
        targets.append(target_token_ids(record, tokenizer, max_target_len))
    return torch.from_numpy(np.stack(rows)), targets


def _pad_batch(targets: list[list[int]]) -> torch.Tensor:
    width = max(len(ids) for ids in targets)
    batch = torch.full((len(targets), width), PAD_ID, dtype=torch.long)
    for row, ids in enumerate(targets):
        batch[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return batch


def _batch_loss(
    module: PrefixCharDecoder,
    embeddings: torch.Tensor,
    target_batch: torch.Tensor,
) -> tuple[torch.Tensor, int]:
    logits = module(embeddings, target_batch)
    token_count = int((target_batch != PAD_ID).sum().item())
    loss_sum = nn.functional.cross_entropy(
        logits.reshape(-1, module.vocab_size),
        target_batch.reshape(-1),
        ignore_index=PAD_ID,
        reduction="sum",
    )
    return loss_sum, token_count


def _dataset_loss(
    module: PrefixCharDecoder,
    embeddings: torch.Tensor,
    targets: list[list[int]],
    batch_size: int,
) -> float:
    module.eval()
    total, tokens = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(targets), batch_size):
            batch_targets = targets[start : start + batch_size]
            loss_sum, count = _batch_loss(
                module, embeddings[start : start + batch_size], _pad_batch(batch_targets)
            )
            total += float(loss_sum.item())
            tokens += count
    return total / max(tokens, 1)


def _epoch_rng(seed: int, epoch: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}|epoch|{epoch}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def train_decoder(
    train_records: Sequence[ProductRecord],
    val_records: Sequence[ProductRecord],
    adapters: AdapterSuite,
    config: TrainConfig,
    resume_from: DecoderCheckpoint | None = None,
) -> TrainResult:
    """Train projector and decoder on text alone; return the best checkpoint.

    Deterministic for a fixed (records, adapters, config): parameter init,
    shuffling, and optional embedding noise are all seeded from config.seed.
    Early stopping watches validation loss with the configured patience
    (patience 0 disables it); the returned checkpoint is the best-validation
    epoch, not the last one.  resume_from continues from a stored checkpoint
    (same config required) with a fresh optimizer.
    """
    if not train_records:
        raise ValueError("no training records")
    if not val_records:
        raise ValueError("no validation records")
    tokenizer = CharTokenizer()
    train_emb, train_targets = _encode_dataset(
        train_records, adapters, tokenizer, config.max_target_len
    )
    val_emb, val_targets = _encode_dataset(
        val_records, adapters, tokenizer, config.max_target_len
    )
    torch.manual_seed(config.seed)
    module = PrefixCharDecoder(
        embedding_dim=adapters.embedding_dim,
        prefix_len=config.prefix_len,
        decoder_dim=config.decoder_dim,
        hidden_size=config.hidden_size,
        vocab_size=tokenizer.vocab_size,
    )
    start_epoch = 1
    best_val = math.inf
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = 0
    if resume_from is not None:
        if resume_from.config_digest != config.digest():
            raise ValueError("checkpoint was trained with a different config")
        resumed = _module_from_checkpoint(resume_from)
        module.load_state_dict(resumed.state_dict())
        start_epoch = resume_from.epoch + 1
        best_val = resume_from.val_loss
        best_state = state_to_numpy(module)
        best_epoch = resume_from.epoch
    optimizer = torch.optim.AdamW(
        module.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    history: list[EpochStats] = []
    stale_epochs = 0
    indices = list(range(len(train_records)))
    for epoch in range(start_epoch, config.max_epochs + 1):
        started = time.monotonic()
        module.train()
        _epoch_rng(config.seed, epoch).shuffle(indices)
        total, tokens = 0.0, 0
        for start in range(0, len(indices), config.batch_size):
            chunk = indices[start : start + config.batch_size]
            emb = train_emb[chunk]
            if config.embedding_noise > 0:
                gen = torch.Generator().manual_seed(
                    (config.seed * 1_000_003 + epoch * 1_009 + start) % (2**63)
                )
                emb = emb + config.embedding_noise * torch.randn(
                    emb.shape, generator=gen
                )
            loss_sum, count = _batch_loss(
                module, emb, _pad_batch([train_targets[i] for i in chunk])
            )
            if not torch.isfinite(loss_sum):
                raise NonFiniteLossError(
                    f"non-finite training loss at epoch {epoch}, batch offset {start}"
                )
            optimizer.zero_grad()
            (loss_sum / max(count, 1)).backward()
            optimizer.step()
            total += float(loss_sum.item())
            tokens += count
        train_loss = total / max(tokens, 1)
        val_loss = _dataset_loss(module, val_emb, val_targets, config.batch_size)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                lr=config.learning_rate,
                wall_seconds=time.monotonic() - started,
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = state_to_numpy(module)
            best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if config.early_stop_patience and stale_epochs >= config.early_stop_patience:
                log.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break
    assert best_state is not None
    load_numpy_state(module, best_state)
    checkpoint = _checkpoint_from_module(module, config, best_epoch, best_val)
    return TrainResult(checkpoint, tuple(history))


class GreedyGenerator:
    """Reusable greedy decoder over a loaded checkpoint.

    The prefix is computed with the numpy projector (the same code path the
    projector tests pin down), then handed to the torch decoder.  Safe to
    reuse across calls; decoding mutates nothing.
    """

    def __init__(self, checkpoint: DecoderCheckpoint) -> None:
        self.checkpoint = checkpoint
        self._module = _module_from_checkpoint(checkpoint)
        self._module.eval()
        self._tokenizer = CharTokenizer()
        self._lock = threading.Lock()

    def generate(self, embedding: EmbeddingVector) -> str:
        prefix = project(embedding, self.checkpoint.projector)
        prefix_tensor = torch.from_numpy(prefix.astype(np.float32))
        with self._lock:
            ids = self._module.greedy(prefix_tensor, self.checkpoint.max_target_len)
        return self._tokenizer.decode(ids)


def reconstruct(
    text: str, checkpoint: DecoderCheckpoint, adapters: AdapterSuite
) -> str:
    """Greedy decode of the projected text embedding.

    On an overfit model this returns the aspect prefix of the training text,
    which is the text-side sanity check that the decoder learned the mapping.
    """
    return GreedyGenerator(checkpoint).generate(adapters.encode_text(text))


def write_training_log(history: Sequence[EpochStats], path: str | Path) -> None:
    """Append-style JSONL training log, one row per epoch."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for stats in history:
            row = {
                "epoch": stats.epoch,
                "train_loss": stats.train_loss,
                "val_loss": stats.val_loss,
                "lr": stats.lr,
                "wall_seconds": stats.wall_seconds,
            }
            handle.write(json.dumps(row, sort_keys=True) + "\n")
