"""Desk-scale autoregressive text decoder with prefix-embedding conditioning.

A character-level GRU: the projected prefix vectors are consumed as the first
input steps, then generation proceeds one character at a time.  Any trainable
autoregressive decoder accepting prefix embeddings could be swapped in; this
one keeps the whole pipeline runnable on a laptop.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

TOKENIZER_ID = "char-ascii-v1"

_CHARS = [chr(c) for c in range(32, 127)]
_CHAR_TO_ID = {ch: i + 4 for i, ch in enumerate(_CHARS)}
_ID_TO_CHAR = {i + 4: ch for i, ch in enumerate(_CHARS)}

VOCAB_SIZE = 4 + len(_CHARS)


class CharTokenizer:
    """Printable-ASCII character tokenizer with PAD/BOS/EOS/UNK specials."""

    tokenizer_id = TOKENIZER_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        return [_CHAR_TO_ID.get(ch, UNK_ID) for ch in text]

    def decode(self, ids: list[int]) -> str:
        return "".join(_ID_TO_CHAR.get(i, "") for i in ids)


class PrefixCharDecoder(nn.Module):
    """GRU decoder fed prefix_len projected slots before the BOS token.

    The projector (an affine map from the shared embedding space to
    prefix_len * decoder_dim) is part of the module so it trains jointly
    with the decoder; the frozen encoders stay outside.
    """

    def __init__(
        self,
        embedding_dim: int,
        prefix_len: int,
        decoder_dim: int,
        hidden_size: int,
        vocab_size: int = VOCAB_SIZE,
    ) -> None:
        super().__init__()
        self.embedding_dim = embedding_dim
        self.prefix_len = prefix_len
        self.decoder_dim = decoder_dim
        self.hidden_size = hidden_size
        self.vocab_size = vocab_size
        self.projector = nn.Linear(embedding_dim, prefix_len * decoder_dim)
        self.char_embed = nn.Embedding(vocab_size, decoder_dim)
        # Re-reads the full slot block at every character step; without this a
        # GRU forgets the conditioning a dozen characters into the output.
        self.slot_read = nn.Linear(prefix_len * decoder_dim, decoder_dim)
        self.gru = nn.GRU(decoder_dim, hidden_size, batch_first=True)
        self.head = nn.Linear(hidden_size, vocab_size)

    def prefix_slots(self, embeddings: torch.Tensor) -> torch.Tensor:
        batch = embeddings.shape[0]
        return self.projector(embeddings).view(batch, self.prefix_len, self.decoder_dim)

    def forward(
        self, embeddings: torch.Tensor, target_ids: torch.Tensor
    ) -> torch.Tensor:
        """Teacher-forced logits of shape [batch, T, vocab] for targets [batch, T]."""
        batch, target_len = target_ids.shape
        prefix = self.prefix_slots(embeddings)
        conditioning = self.slot_read(prefix.reshape(batch, 1, -1))
        bos = torch.full((batch, 1), BOS_ID, dtype=torch.long, device=target_ids.device)
        shifted = torch.cat([bos, target_ids[:, :-1]], dim=1)
        inputs = torch.cat([prefix, self.char_embed(shifted) + conditioning], dim=1)
        out, _ = self.gru(inputs)
        # Positions prefix_len .. prefix_len+T-1 have consumed the prefix plus
        # BOS t1 .. t_{i-1}, so they predict t1 .. tT.
        return self.head(out[:, self.prefix_len :, :])

    @torch.no_grad()
    def greedy(self, prefix: torch.Tensor, max_len: int) -> list[int]:
        """Greedy decode from one [prefix_len, decoder_dim] prefix tensor."""
        self.eval()
        batch_prefix = prefix.unsqueeze(0)
        conditioning = self.slot_read(batch_prefix.reshape(1, 1, -1))
        _, hidden = self.gru(batch_prefix)
        token = torch.tensor([[BOS_ID]], dtype=torch.long)
        ids: list[int] = []
        for _ in range(max_len):
            step_input = self.char_embed(token) + conditioning
            out, hidden = self.gru(step_input, hidden)
            next_id = int(torch.argmax(self.head(out[:, -1, :]), dim=-1).item())
            if next_id == EOS_ID:
                break
            ids.append(next_id)
            token = torch.tensor([[next_id]], dtype=torch.long)
        return ids


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot parameters as float32 numpy arrays keyed by state_dict name."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, tensor in module.state_dict().items()
    }


def load_numpy_state(module: nn.Module, state: dict[str, np.ndarray]) -> None:
    tensors = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in state.items()}
    module.load_state_dict(tensors)
