"""Question side: vocabulary, bidirectional sentence encoding, and the
recurrent textual-query generator that drives each reasoning step.

All tensors are float64; each sample's question is a padded row of token
indices plus a length. Word attention is always masked to the true length, so
padding can never leak into a query vector.
"""

from typing import Iterable, List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, UNK = "<pad>", "<unk>"


class Vocabulary:
    """Dense word -> index map; index 0 is padding, index 1 unknown."""

    def __init__(self, tokens: Iterable[str]):
        words = sorted(set(tokens) - {PAD, UNK})
        self.words: List[str] = [PAD, UNK] + words
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def save(self, path) -> None:
        with open(path, "w") as f:
            for w in self.words:
                f.write(w + "\n")

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path) as f:
            words = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if words[:2] != [PAD, UNK]:
            raise ValueError("vocabulary file must start with <pad>, <unk>")
        vocab = Vocabulary([])
        vocab.words = words
        vocab.index = {w: i for i, w in enumerate(words)}
        return vocab


def pad_batch(token_ids: Sequence[Sequence[int]], max_len: int = 0):
    """Pad to a common length; returns (ids (B, L) long, lengths (B,) long)."""
    lengths = torch.tensor([len(t) for t in token_ids], dtype=torch.long)
    if int(lengths.min()) < 1:
        raise ValueError("questions must contain at least one token")
    L = max(int(lengths.max()), max_len)
    out = torch.zeros(len(token_ids), L, dtype=torch.long)
    for i, ids in enumerate(token_ids):
        out[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out, lengths


class QuestionEncoder(nn.Module):
    """Embedding lookup + BiLSTM.

    Outputs word features (B, L, 2d) that see the whole sentence and a
    sentence feature (B, 2d) concatenating the final forward and backward
    states.
    """

    def __init__(self, vocab_size: int, d_embed: int = 32, d: int = 64, max_len: int = 24):
        super().__init__()
        self.d = d
        self.d_q = 2 * d
        self.max_len = max_len
        self.embedding = nn.Embedding(vocab_size, d_embed, padding_idx=0)
        self.rnn = nn.LSTM(d_embed, d, batch_first=True, bidirectional=True)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor):
        if tokens.dim() != 2 or tokens.shape[1] < 1:
            raise ValueError("tokens must be a non-empty (B, L) index tensor")
        if int(lengths.max()) > self.max_len:
            raise ValueError(f"question longer than max_len={self.max_len}")
        emb = self.embedding(tokens)
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, (h_n, _) = self.rnn(packed)
        f_w, _ = nn.utils.rnn.pad_packed_sequence(
            out, batch_first=True, total_length=tokens.shape[1]
        )
        # h_n is (2, B, d): forward final state then backward final state.
        f_s = torch.cat([h_n[0], h_n[1]], dim=-1)
        return f_s, f_w


class QueryGenerator(nn.Module):
    """Produces the textual query q_t for each reasoning step.

    Per step: a step-specific projection of the sentence feature is fused with
    the previous query, the fused vector scores every word, and q_t is the
    attention-weighted word sum mapped into query space. Word features are
    mapped to query space up front; because the attention weights sum to one,
    this is identical to projecting the weighted sum afterwards.
    """

    def __init__(self, d: int = 64, steps: int = 4):
        super().__init__()
        self.d = d
        self.d_q = 2 * d
        self.steps = steps
        self.q_init = nn.Parameter(torch.zeros(d))
        self.sentence_proj = nn.ModuleList(
            [nn.Linear(self.d_q, d) for _ in range(steps)]
        )
        self.fuse = nn.Linear(2 * d, d)
        self.word_proj = nn.Linear(self.d_q, d)
        self.score = nn.Linear(d, 1)

    def initial_query(self, batch: int) -> torch.Tensor:
        return self.q_init.unsqueeze(0).expand(batch, -1)

    def step(
        self,
        f_s: torch.Tensor,
        f_w: torch.Tensor,
        lengths: torch.Tensor,
        q_prev: torch.Tensor,
        t: int,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """One query step; t runs from 1 to `steps`.

        Returns (q_t (B, d), word attention (B, L)).
        """
        if not 1 <= t <= self.steps:
            raise ValueError(f"step {t} outside 1..{self.steps}")
        s = self.sentence_proj[t - 1](f_s)
        u = self.fuse(torch.cat([s, q_prev], dim=-1))
        words = self.word_proj(f_w)  # (B, L, d)
        logits = self.score(u.unsqueeze(1) * words).squeeze(-1)  # (B, L)
        mask = torch.arange(f_w.shape[1], device=f_w.device)[None, :] >= lengths[:, None]
        logits = logits.masked_fill(mask, float("-inf"))
        a_w = torch.softmax(logits, dim=-1)
        q_t = torch.einsum("bl,bld->bd", a_w, words)
        return q_t, a_w
