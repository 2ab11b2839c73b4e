"""Document-structured parallel corpora.

File format: paired plain-text files (`name.src` / `name.trg`), one
sentence per line, documents separated by blank lines.  Synthetic corpora
additionally carry a `name.meta` file recording each document's hidden
synonym choice and which sentences contain the ambiguous slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bpe as B

SRC_ENTITY = "ent"
PRONOUN = "pro"
SYNONYMS = ("syna", "synb")
SRC_MARKERS = ("mrka", "mrkb")
PERIOD = "."


@dataclass
class Document:
    """Ordered parallel sentence pairs; the unit of translation context."""

    doc_id: str
    pairs: list[tuple[list[str], list[str]]]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError(f"document {self.doc_id} has no sentence pairs")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def src_sentences(self) -> list[list[str]]:
        return [src for src, _ in self.pairs]

    @property
    def trg_sentences(self) -> list[list[str]]:
        return [trg for _, trg in self.pairs]


def _read_blocks(path) -> list[list[str]]:
    blocks: list[list[str]] = []
    current: list[str] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.strip():
                current.append(line)
            elif current:
                blocks.append(current)
                current = []
    if current:
        blocks.append(current)
    return blocks


def load_blocks(path) -> list[list[list[str]]]:
    """Blank-line-delimited documents as token lists, one file only."""
    return [[line.split() for line in block] for block in _read_blocks(path)]


def load_documents(src_path, trg_path) -> list[Document]:
    src_blocks = _read_blocks(src_path)
    trg_blocks = _read_blocks(trg_path)
    if len(src_blocks) != len(trg_blocks):
        raise ValueError(
            f"document count mismatch: {len(src_blocks)} source blocks vs "
            f"{len(trg_blocks)} target blocks")
    docs = []
    for idx, (sb, tb) in enumerate(zip(src_blocks, trg_blocks)):
        if len(sb) != len(tb):
            raise ValueError(
                f"document {idx}: {len(sb)} source sentences vs {len(tb)} target")
        pairs = [(s.split(), t.split()) for s, t in zip(sb, tb)]
        docs.append(Document(doc_id=f"d{idx:05d}", pairs=pairs))
    return docs


def save_documents(docs: Sequence[Document], src_path, trg_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, \
            open(trg_path, "w", encoding="utf-8") as ft:
        for i, doc in enumerate(docs):
            if i:
                fs.write("\n")
                ft.write("\n")
            for src, trg in doc.pairs:
                fs.write(" ".join(src) + "\n")
                ft.write(" ".join(trg) + "\n")


def filter_documents(docs: Sequence[Document], max_len: int = 100) -> list[Document]:
    """Drop a whole document if any sentence on either side exceeds max_len."""
    kept = []
    for doc in docs:
        if all(len(s) <= max_len and len(t) <= max_len for s, t in doc.pairs):
            kept.append(doc)
    return kept


def segment_documents(docs: Sequence[Document], src_model: B.BpeModel,
                      trg_model: B.BpeModel) -> list[Document]:
    return [
        Document(doc.doc_id,
                 [(B.apply_bpe(s, src_model), B.apply_bpe(t, trg_model))
                  for s, t in doc.pairs])
        for doc in docs
    ]


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchPosition:
    """Padded matrices for sentence index i across the batch's documents."""

    src: np.ndarray        # (B, M) int ids, PAD on unused slots
    src_mask: np.ndarray   # (B, M) 1.0 on real tokens
    trg: np.ndarray        # (B, N) gold target ids, no specials
    trg_mask: np.ndarray   # (B, N)
    trg_in: np.ndarray     # (B, N+1) BOS + gold
    trg_out: np.ndarray    # (B, N+1) gold + EOS
    out_mask: np.ndarray   # (B, N+1) counts gold tokens plus the EOS step
    active: np.ndarray     # (B,) 1.0 while the document still has sentences


@dataclass
class DocumentBatch:
    doc_ids: list[str]
    lengths: list[int]
    positions: list[BatchPosition]

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)


def _pad_matrix(rows: list[list[int]], width: int, pad: int) -> np.ndarray:
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def _mask_matrix(rows: list[list[int]], width: int) -> np.ndarray:
    out = np.zeros((len(rows), width), dtype=np.float32)
    for i, row in enumerate(rows):
        out[i, :len(row)] = 1.0
    return out


def build_batch(docs: Sequence[Document], src_vocab: B.Vocabulary,
                trg_vocab: B.Vocabulary) -> DocumentBatch:
    max_len = max(len(d) for d in docs)
    positions = []
    for i in range(max_len):
        src_rows, trg_rows, active = [], [], []
        for doc in docs:
            if i < len(doc):
                s, t = doc.pairs[i]
                src_rows.append(src_vocab.encode(s))
                trg_rows.append(trg_vocab.encode(t))
                active.append(1.0)
            else:
                src_rows.append([])
                trg_rows.append([])
                active.append(0.0)
        m = max(1, max(len(r) for r in src_rows))
        n = max(1, max(len(r) for r in trg_rows))
        in_rows = [[B.BOS] + r for r in trg_rows]
        out_rows = [r + [B.EOS] if r else [] for r in trg_rows]
        positions.append(BatchPosition(
            src=_pad_matrix(src_rows, m, B.PAD),
            src_mask=_mask_matrix(src_rows, m),
            trg=_pad_matrix(trg_rows, n, B.PAD),
            trg_mask=_mask_matrix(trg_rows, n),
            trg_in=_pad_matrix(in_rows, n + 1, B.PAD),
            trg_out=_pad_matrix(out_rows, n + 1, B.PAD),
            out_mask=_mask_matrix(out_rows, n + 1),
            active=np.asarray(active, dtype=np.float32),
        ))
    return DocumentBatch(doc_ids=[d.doc_id for d in docs],
                         lengths=[len(d) for d in docs],
                         positions=positions)


def make_batches(docs: Sequence[Document], src_vocab: B.Vocabulary,
                 trg_vocab: B.Vocabulary, max_docs: int = 128,
                 rng: Optional[np.random.Generator] = None,
                 shuffle: bool = True) -> list[DocumentBatch]:
    """Shuffle documents, then group them into batches of at most max_docs."""
    if not docs:
        raise ValueError("make_batches requires a non-empty document list")
    order = list(range(len(docs)))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling requires an rng")
        order = list(rng.permutation(len(docs)))
    batches = []
    for start in range(0, len(order), max_docs):
        group = [docs[j] for j in order[start:start + max_docs]]
        batches.append(build_batch(group, src_vocab, trg_vocab))
    return batches


# ---------------------------------------------------------------------------
# synthetic context-dependent corpus


@dataclass
class SynthConfig:
    """Generator settings for the ambiguous-synonym corpus.

    Each document flips a hidden coin.  The coin picks the target
    rendering of an ambiguous entity (one of two synonyms) and, with it, a
    target-side register: filler word k is rendered "wk" under one choice
    and "vk" under the other, the way a discourse-level register decision
    colors every sentence.  Source fillers are always "wk", so nothing on
    the source side of ambiguous sentences reveals the coin.

    trg-informative: sentence 1 translates an entity token into the chosen
    synonym; later sentences show only a pronoun on the source side, so
    the correct synonym is recoverable from target-side context alone.
    src-informative: marker sentences (whose source carries a
    choice-revealing marker token) alternate with ambiguous ones, so the
    preceding source sentence disambiguates instead.
    """

    mode: str = "trg-informative"
    num_documents: int = 1000
    sentences_per_doc: tuple[int, int] = (2, 4)
    num_fillers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("trg-informative", "src-informative"):
            raise ValueError(f"unknown synthetic mode: {self.mode}")
        lo, hi = self.sentences_per_doc
        if lo < 2 or hi < lo:
            raise ValueError("sentences_per_doc must satisfy 2 <= lo <= hi")


@dataclass
class SlotMeta:
    """Hidden choice behind one document, for scoring the ambiguous slots."""

    doc_id: str
    choice: str                      # the synonym token the document uses
    slot_indices: list[int] = field(default_factory=list)


def generate_synthetic(cfg: SynthConfig) -> tuple[list[Document], list[SlotMeta]]:
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.sentences_per_doc
    docs, metas = [], []
    for d in range(cfg.num_documents):
        length = int(rng.integers(lo, hi + 1))
        choice_idx = int(rng.integers(2))
        synonym = SYNONYMS[choice_idx]
        marker = SRC_MARKERS[choice_idx]
        register = "w" if choice_idx == 0 else "v"
        pairs, slots = [], []
        for i in range(length):
            picked = [int(k) for k in
                      rng.integers(0, cfg.num_fillers, size=int(rng.integers(2, 7)))]
            src_fill = [f"w{k}" for k in picked]
            trg_fill = [f"{register}{k}" for k in picked]
            if cfg.mode == "trg-informative":
                key = SRC_ENTITY if i == 0 else PRONOUN
                src = [key] + src_fill + [PERIOD]
                trg = [synonym] + trg_fill + [PERIOD]
                if i > 0:
                    slots.append(i)
            else:
                if i % 2 == 0:
                    src = [marker] + src_fill + [PERIOD]
                    trg = [synonym] + trg_fill + [PERIOD]
                else:
                    src = [PRONOUN] + src_fill + [PERIOD]
                    trg = [synonym] + trg_fill + [PERIOD]
                    slots.append(i)
            pairs.append((src, trg))
        doc_id = f"d{d:05d}"
        docs.append(Document(doc_id, pairs))
        metas.append(SlotMeta(doc_id, synonym, slots))
    return docs, metas


def save_meta(metas: Sequence[SlotMeta], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for m in metas:
            slots = ",".join(str(i) for i in m.slot_indices)
            f.write(f"{m.doc_id}\t{m.choice}\t{slots}\n")


def load_meta(path) -> list[SlotMeta]:
    metas = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, choice, slots = line.split("\t")
            indices = [int(s) for s in slots.split(",")] if slots else []
            metas.append(SlotMeta(doc_id, choice, indices))
    return metas
