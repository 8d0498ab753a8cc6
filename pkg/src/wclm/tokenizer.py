"""Lossless byte-level subword tokenizer (BPE over raw UTF-8 bytes).

Ids 0..255 are the byte tokens, 256..258 are reserved (pad, begin, end), and
merged subwords follow from 259 in training order. Encoding starts from the
byte sequence and replays the merge rules in order, so any UTF-8 string is
representable and decode(encode(s)) == s.
"""

from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, VocabularyError

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
NUM_RESERVED = 3
BASE_VOCAB = 256 + NUM_RESERVED

_RESERVED_NAMES = {PAD_ID: "<pad>", BOS_ID: "<bos>", EOS_ID: "<eos>"}


class Vocab:
    """Immutable id<->subword table plus the ordered merge-rule list."""

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        token_bytes: list[bytes] = [bytes([i]) for i in range(256)]
        token_bytes += [b""] * NUM_RESERVED  # reserved ids carry no bytes
        self.merges: tuple[tuple[int, int], ...] = tuple(merges)
        for left, right in self.merges:
            if not (0 <= left < len(token_bytes) and 0 <= right < len(token_bytes)):
                raise ConfigError(f"merge ({left}, {right}) references an undefined token")
            token_bytes.append(token_bytes[left] + token_bytes[right])
        self.token_bytes: tuple[bytes, ...] = tuple(token_bytes)
        self.bytes_to_id: dict[bytes, int] = {}
        for token_id, bs in enumerate(self.token_bytes):
            if bs:
                self.bytes_to_id[bs] = token_id

    @property
    def size(self) -> int:
        return len(self.token_bytes)

    def encode(self, text: str) -> list[int]:
        """Tokenize: byte-level encoding, then merges applied in rule order."""
        ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        for rule_index, (left, right) in enumerate(self.merges):
            if ids.size < 2:
                break
            ids = kernels.merge_pair(ids, left, right, BASE_VOCAB + rule_index)
        return ids.tolist()

    def decode(self, tokens: Sequence[int]) -> str:
        """Concatenate subword bytes, dropping reserved tokens."""
        parts = []
        for token_id in tokens:
            if not 0 <= token_id < self.size:
                raise VocabularyError(f"token id {token_id} outside vocabulary of size {self.size}")
            parts.append(self.token_bytes[token_id])
        return b"".join(parts).decode("utf-8", errors="replace")

    def save(self, path: str | Path) -> None:
        lines = [f"vocab {self.size}"]
        for left, right in self.merges:
            lines.append(f"{self.token_bytes[left].hex()}\t{self.token_bytes[right].hex()}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("vocab "):
            raise ConfigError(f"{path}: missing 'vocab <size>' header")
        try:
            declared = int(lines[0].split()[1])
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed vocab header") from exc
        bytes_to_id = {bytes([i]): i for i in range(256)}
        merges: list[tuple[int, int]] = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                left_hex, right_hex = line.split("\t")
                left_bytes, right_bytes = bytes.fromhex(left_hex), bytes.fromhex(right_hex)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: malformed merge rule") from exc
            if left_bytes not in bytes_to_id or right_bytes not in bytes_to_id:
                raise ConfigError(f"{path}:{lineno}: merge references an unknown subword")
            merges.append((bytes_to_id[left_bytes], bytes_to_id[right_bytes]))
            bytes_to_id[left_bytes + right_bytes] = BASE_VOCAB + len(merges) - 1
        vocab = cls(merges)
        if vocab.size != declared:
            raise ConfigError(f"{path}: header declares {declared} tokens, found {vocab.size}")
        return vocab


def train_bpe(corpus: Sequence[str], vocab_size: int) -> Vocab:
    """Learn greedy highest-frequency pair merges from a corpus.

    Merging stops when the vocabulary reaches ``vocab_size`` or no adjacent
    pair occurs at least twice. Ties on frequency break by lexicographic
    order of the (left, right) subword byte strings; a candidate whose
    concatenation already names an existing token is skipped so the
    id<->subword mapping stays a bijection.
    """
    if vocab_size < BASE_VOCAB:
        raise ConfigError(f"vocab_size must be >= {BASE_VOCAB} (256 bytes + {NUM_RESERVED} reserved)")
    if len(corpus) == 0:
        raise ConfigError("cannot train a vocabulary on an empty corpus")

    sequences = [
        np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        for text in corpus
    ]
    vocab = Vocab()
    merges: list[tuple[int, int]] = []
    token_bytes = list(vocab.token_bytes)
    known = set(vocab.bytes_to_id)

    while BASE_VOCAB + len(merges) < vocab_size:
        packed_all = [seq[:-1] << 32 | seq[1:] for seq in sequences if seq.size >= 2]
        if not packed_all:
            break
        pairs, counts = np.unique(np.concatenate(packed_all), return_counts=True)
        order = sorted(
            range(len(pairs)),
            key=lambda i: (
                -int(counts[i]),
                token_bytes[int(pairs[i] >> 32)],
                token_bytes[int(pairs[i] & 0xFFFFFFFF)],
            ),
        )
        chosen = None
        for i in order:
            if counts[i] < 2:
                break
            left, right = int(pairs[i] >> 32), int(pairs[i] & 0xFFFFFFFF)
            if token_bytes[left] + token_bytes[right] not in known:
                chosen = (left, right)
                break
        if chosen is None:
            break
        left, right = chosen
        new_id = BASE_VOCAB + len(merges)
        sequences = [
            kernels.merge_pair(seq, left, right, new_id) if seq.size >= 2 else seq
            for seq in sequences
        ]
        merges.append(chosen)
        new_bytes = token_bytes[left] + token_bytes[right]
        token_bytes.append(new_bytes)
        known.add(new_bytes)

    return Vocab(merges)
