"""Byte-level tokenization, synthetic corpora, and long-context evaluations.

Two corpus kinds:

* markov-text: order-2 character chains over lowercase letters and space,
  one chain per corpus seed. Filler prose that never repeats.
* structured-kv: markov filler interleaved with binding lines "@key=val"
  and recall lines "?key:val" that restate the value of an earlier key.
  Recall lines are the long-range signal: predicting their value bytes
  requires remembering a binding that may be far outside any local window.

The needle-in-a-haystack task embeds a single binding in distractor filler
at a controlled depth and asks for its value at the very end.

Corpus file format: one record per line,
    <doc_id> TAB <payload hex> TAB <metadata JSON>
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .model import GptAlphaConfig, GptAlphaParams, model_forward, positional_losses

N_BYTES = 256
PAD_ID = 256
BOS_ID = 257
VOCAB_SIZE = 258

_FILLER_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
KEY_LEN = 3
VAL_LEN = 3
BINDING_TEMPLATE = "@{key}={val}\n"
QUERY_TEMPLATE = "?{key}:{val}\n"
QUERY_PREFIX = "?{key}:"


def byte_tokenize(text: str | bytes) -> np.ndarray:
    """Bytes to ids; str input is encoded as UTF-8."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def byte_detokenize(ids) -> str:
    """Ids back to text (latin-1, the lossless byte mapping)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= N_BYTES):
        bad = ids[(ids < 0) | (ids >= N_BYTES)].flat[0]
        raise ValueError(f"id {int(bad)} is not a byte (reserved/special ids "
                         "cannot be detokenized)")
    return bytes(ids.astype(np.uint8)).decode("latin-1")


@dataclass
class Document:
    doc_id: str
    payload: bytes
    meta: dict = field(default_factory=dict)

    @property
    def ids(self) -> np.ndarray:
        return byte_tokenize(self.payload)


def write_corpus(path: str | Path, docs: list[Document]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(f"{doc.doc_id}\t{doc.payload.hex()}\t"
                    f"{json.dumps(doc.meta, sort_keys=True)}\n")


def read_corpus(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, payload_hex, meta = line.split("\t", 2)
            docs.append(Document(doc_id=doc_id, payload=bytes.fromhex(payload_hex),
                                 meta=json.loads(meta)))
    return docs


# ---------------------------------------------------------------------------
# Markov filler

class _MarkovChain:
    """Order-2 character chain with corpus-specific random transitions."""

    def __init__(self, rng: np.random.Generator):
        n = len(_FILLER_ALPHABET)
        weights = rng.random((n, n, n)) ** 3  # skew toward few likely successors
        self.probs = weights / weights.sum(axis=-1, keepdims=True)
        self.n = n

    def sample(self, rng: np.random.Generator, length: int) -> str:
        n = self.n
        out = np.empty(length, dtype=np.int64)
        a, b = int(rng.integers(n)), int(rng.integers(n))
        for i in range(length):
            nxt = int(rng.choice(n, p=self.probs[a, b]))
            out[i] = nxt
            a, b = b, nxt
        return "".join(_FILLER_ALPHABET[i] for i in out)


def _repeated_window(data: bytes, width: int = 32) -> bool:
    if len(data) < 2 * width:
        return False
    seen = set()
    for i in range(len(data) - width + 1):
        w = data[i:i + width]
        if w in seen:
            return True
        seen.add(w)
    return False


def _random_key_n(rng: np.random.Generator, n: int) -> str:
    return "".join(chr(ord("a") + int(rng.integers(26))) for _ in range(n))


def _random_val_n(rng: np.random.Generator, n: int) -> str:
    return "".join(chr(ord("0") + int(rng.integers(10))) for _ in range(n))


def gen_corpus(seed: int, n_docs: int, min_len: int = 512, max_len: int = 0,
               kind: str = "structured-kv", query_prob: float = 0.55,
               filler_range: tuple[int, int] = (4, 14),
               key_len: int = KEY_LEN, val_len: int = VAL_LEN,
               recent_prob: float = 0.4) -> list[Document]:
    """Deterministic corpus; every document is at least min_len bytes.

    recent_prob biases that fraction of recall lines toward one of the three
    most recent bindings, so retrieval is exercised at every distance from
    adjacent to document-wide.

    Each document gets its own filler chain and its own item density (the
    filler range scaled by a per-document factor of 1-8x), so contexts range
    from densely structured to mostly prose with a rare binding.
    """
    if kind not in ("markov-text", "structured-kv"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    if max_len <= 0:
        max_len = min_len
    docs = []
    for i in range(n_docs):
        rng = np.random.default_rng([seed, 0x646f63, i])
        chain = _MarkovChain(rng)
        length = int(rng.integers(min_len, max_len + 1))
        if kind == "markov-text":
            text = chain.sample(rng, length)
            docs.append(Document(doc_id=f"markov-{seed}-{i}",
                                 payload=text.encode("latin-1"),
                                 meta={"kind": kind}))
            continue
        docs.append(_gen_structured_doc(chain, rng, length, query_prob,
                                        filler_range, f"kv-{seed}-{i}",
                                        key_len, val_len, recent_prob))
    return docs


def _gen_structured_doc(chain, rng, length, query_prob, filler_range,
                        doc_id, key_len, val_len, recent_prob) -> Document:
    parts: list[str] = []
    size = 0
    bindings: list[tuple[str, str, int]] = []  # key, val, offset
    queries: list[dict] = []
    used_keys: set[str] = set()
    density = float(np.exp(rng.uniform(0.0, np.log(8.0))))
    lo = max(1, int(filler_range[0] * density))
    hi = max(lo + 1, int(filler_range[1] * density))
    while size < length:
        filler = chain.sample(rng, int(rng.integers(lo, hi)))
        parts.append(filler)
        size += len(filler)
        if bindings and rng.random() < query_prob:
            if rng.random() < recent_prob:
                pick = len(bindings) - 1 - int(rng.integers(min(3, len(bindings))))
            else:
                pick = int(rng.integers(len(bindings)))
            key, val, bound_at = bindings[pick]
            line = QUERY_TEMPLATE.format(key=key, val=val)
            queries.append({"key": key, "offset": size, "ref_offset": bound_at,
                            "distance": size - bound_at})
        else:
            key = _random_key_n(rng, key_len)
            while key in used_keys:
                key = _random_key_n(rng, key_len)
            used_keys.add(key)
            val = _random_val_n(rng, val_len)
            bindings.append((key, val, size))
            line = BINDING_TEMPLATE.format(key=key, val=val)
        parts.append(line)
        size += len(line)
    payload = "".join(parts).encode("latin-1")
    meta = {"kind": "structured-kv", "key_len": key_len, "val_len": val_len,
            "density": density,
            "bindings": [{"key": k, "val": v, "offset": o}
                         for k, v, o in bindings],
            "queries": queries}
    return Document(doc_id=doc_id, payload=payload, meta=meta)


# ---------------------------------------------------------------------------
# Needle in a haystack

@dataclass
class NiahSample:
    context: np.ndarray          # token ids, ends with the query prefix
    needle: tuple[str, str]      # (key, value)
    needle_position: float       # requested depth fraction
    needle_offset: int           # actual byte offset of the needle line
    query_suffix: str
    answer: str
    distractor_kind: str


def gen_niah(seed: int, context_len: int, depth: float,
             distractor_kind: str = "novel-text",
             key_len: int = KEY_LEN, val_len: int = VAL_LEN) -> NiahSample:
    """One retrieval sample: filler + one binding at `depth` + query at the end.

    Novel-text distractors are markov prose guaranteed to never repeat a
    32-byte window; repeated distractors tile a fixed phrase. The binding is
    the only '@' line, so the answer appears in the context exactly once.
    """
    if distractor_kind not in ("novel-text", "repeated"):
        raise ValueError(f"unknown distractor kind {distractor_kind!r}")
    rng = np.random.default_rng([seed, 0x6e696168])
    key, val = _random_key_n(rng, key_len), _random_val_n(rng, val_len)
    needle = BINDING_TEMPLATE.format(key=key, val=val)
    query = QUERY_PREFIX.format(key=key)
    budget = context_len - len(needle) - len(query)
    if budget < 0:
        raise ValueError(f"context_len {context_len} cannot fit needle and query")
    offset = int(round(depth * budget))
    offset = min(max(offset, 0), budget)

    for attempt in range(8):
        if distractor_kind == "repeated":
            phrase = "the quick brown fox jumps over the lazy dog "
            filler = (phrase * (budget // len(phrase) + 1))[:budget]
        else:
            chain = _MarkovChain(np.random.default_rng([seed, 0x66696c6c, attempt]))
            filler = chain.sample(rng, budget)
        text = filler[:offset] + needle + filler[offset:] + query
        if distractor_kind == "repeated" or \
                not _repeated_window(filler.encode("latin-1")):
            return NiahSample(context=byte_tokenize(text), needle=(key, val),
                              needle_position=depth, needle_offset=offset,
                              query_suffix=query, answer=val,
                              distractor_kind=distractor_kind)
    raise RuntimeError("could not generate novel filler without repeats")


def eval_niah(params: GptAlphaParams, config: GptAlphaConfig,
              samples: list[NiahSample], extra_tokens: int = 2) -> float:
    """Fraction of samples whose greedy continuation contains the answer.

    Samples must share one context length; decoding is batched across them.
    """
    if not samples:
        return 0.0
    lengths = {len(s.context) for s in samples}
    if len(lengths) > 1:
        raise ValueError(f"samples must share a context length, got {lengths}")
    n_new = max(len(s.answer) for s in samples) + extra_tokens
    ids = np.stack([s.context for s in samples])
    generated = np.zeros((len(samples), 0), dtype=np.int64)
    for _ in range(n_new):
        with tt.no_grad():
            logits = model_forward(params, ids, config).data
        nxt = logits[:, -1, :].argmax(axis=-1)
        ids = np.concatenate([ids, nxt[:, None]], axis=-1)
        generated = np.concatenate([generated, nxt[:, None]], axis=-1)
    hits = 0
    for sample, row in zip(samples, generated):
        text = "".join(chr(t) if t < N_BYTES else "?" for t in row)
        if sample.answer in text:
            hits += 1
    return hits / len(samples)


# ---------------------------------------------------------------------------
# Loss over position

def eval_loss_by_position(params: GptAlphaParams, config: GptAlphaConfig,
                          docs: list[np.ndarray], block_size: int):
    """Mean next-token loss per consecutive block of positions.

    Returns (block_starts, block_means, block_counts) averaged over
    documents; the loss of predicting the token at position t is charged to
    block t // block_size (position 0 is never predicted).
    """
    if not docs:
        raise ValueError("no documents")
    seq_len = min(len(d) for d in docs)
    n_blocks = seq_len // block_size
    if n_blocks == 0:
        raise ValueError("documents shorter than one block")
    sums = np.zeros(n_blocks)
    counts = np.zeros(n_blocks)
    for doc in docs:
        doc = np.asarray(doc)[:seq_len]
        losses = positional_losses(params, doc, config)  # predicts ids[1:]
        positions = np.arange(1, seq_len)
        blocks = positions // block_size
        valid = blocks < n_blocks
        np.add.at(sums, blocks[valid], losses[valid])
        np.add.at(counts, blocks[valid], 1.0)
    return (np.arange(n_blocks) * block_size, sums / counts, counts)
