"""Frozen text-encoder interface producing fixed 768-dim unit embeddings.

Two providers share the interface: a deterministic hash-based stand-in
(`embed_hashed`) and a file-backed lookup table (`embed_lookup`) for
importing embeddings from a real frozen language model.  Nothing in this
package ever mutates or fine-tunes embedding outputs.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import BadTableFormat, EmptyPrompt, KeyNotFound

EMBED_DIM = 768

_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[0-9a-z]+")


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


class SplitMix64:
    """Tiny 64-bit PRNG; one page of spec, bit-exact across languages."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def next_unit_interval(self) -> float:
        # 53-bit mantissa draw mapped to [-1, 1)
        return (self.next_u64() >> 11) * (2.0**-53) * 2.0 - 1.0


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


_token_cache: dict[str, np.ndarray] = {}


def _token_vector(token: str) -> np.ndarray:
    vec = _token_cache.get(token)
    if vec is None:
        rng = SplitMix64(fnv1a64(token.encode("utf-8")))
        vec = np.array([rng.next_unit_interval() for _ in range(EMBED_DIM)])
        vec.setflags(write=False)
        _token_cache[token] = vec
    return vec


def embed_hashed(text: str) -> np.ndarray:
    """Deterministic stand-in embedding: unit-norm mean of per-token vectors.

    Each token seeds a SplitMix64 stream with its FNV-1a hash and draws
    EMBED_DIM values in [-1, 1); the prompt embedding is the L2-normalized
    mean over tokens (hence order-insensitive).
    """
    tokens = tokenize(text)
    if not tokens:
        raise EmptyPrompt(f"no alphanumeric tokens in prompt {text!r}")
    acc = np.zeros(EMBED_DIM, dtype=np.float64)
    for tok in tokens:
        acc += _token_vector(tok)
    acc /= len(tokens)
    return acc / np.linalg.norm(acc)


def load_embedding_table(path: str) -> dict[str, np.ndarray]:
    """Parse a table file: header line ``E=768``, then ``key\\tv1 v2 ...``."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("E="):
            raise BadTableFormat(f"{path}: first line must be E=<dim>, got {header!r}")
        try:
            dim = int(header[2:])
        except ValueError as exc:
            raise BadTableFormat(f"{path}: bad dimension in header") from exc
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise BadTableFormat(f"{path}:{lineno}: missing tab separator")
            key, values = line.split("\t", 1)
            try:
                vec = np.array([float(v) for v in values.split()], dtype=np.float64)
            except ValueError as exc:
                raise BadTableFormat(f"{path}:{lineno}: bad number") from exc
            if vec.size != dim:
                raise BadTableFormat(
                    f"{path}:{lineno}: expected {dim} values, got {vec.size}"
                )
            table[_normalize_key(key)] = vec
    return table


def save_embedding_table(table: dict[str, np.ndarray], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dims = {v.size for v in table.values()} or {EMBED_DIM}
        fh.write(f"E={dims.pop()}\n")
        for key, vec in table.items():
            fh.write(key + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def _normalize_key(key: str) -> str:
    return " ".join(key.split())


def embed_lookup(text: str, table: dict[str, np.ndarray]) -> np.ndarray:
    """Fetch a stored embedding by exact key (after whitespace normalization)."""
    key = _normalize_key(text)
    if key not in table:
        raise KeyNotFound(f"no embedding stored for {key!r}")
    vec = np.asarray(table[key], dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise BadTableFormat(f"stored embedding for {key!r} has zero norm")
    return vec / norm


def embed_batch(texts: list[str], provider) -> np.ndarray:
    """Stack provider(text) rows into an (N, E) matrix; errors name the index."""
    rows = []
    for i, text in enumerate(texts):
        try:
            rows.append(provider(text))
        except Exception as exc:
            raise type(exc)(f"prompt {i}: {exc}") from exc
    return np.stack(rows, axis=0)
