"""Embedding tables and per-example input assembly.

Behaviors are front-padded so the most recent behavior always sits in the
last row; id 0 is the padding id in every table and its row stays zero.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import IdOverflowError, IngestionError


@dataclass
class TrainingExample:
    user_id: int
    behaviors: list  # [(item_id, cat_id), ...], most recent last
    target: tuple  # (item_id, cat_id)
    other: list = field(default_factory=list)
    label: int = 0

    def to_dict(self):
        return {
            "user_id": int(self.user_id),
            "behaviors": [[int(i), int(c)] for i, c in self.behaviors],
            "target": [int(self.target[0]), int(self.target[1])],
            "other": [int(o) for o in self.other],
            "label": int(self.label),
        }


class EmbeddingTable(nx.Module):
    def __init__(self, vocab_size, dim, rng, std=0.01, name="table"):
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        self.field_name = name
        w = rng.normal(0.0, std, (self.vocab_size, self.dim))
        w[0] = 0.0
        self.weights = nx.Parameter(w, name=name, frozen_rows=(0,))

    def check_ids(self, ids, line=None):
        ids = np.asarray(ids)
        if ids.size and (ids.max() >= self.vocab_size or ids.min() < 0):
            bad = int(ids.max() if ids.max() >= self.vocab_size else ids.min())
            raise IdOverflowError(
                f"{self.field_name} id {bad} outside vocabulary of size {self.vocab_size}",
                line=line, field=self.field_name)

    def lookup(self, ids):
        return nx.index(self.weights, np.asarray(ids, dtype=np.int64))


class FeatureTables(nx.Module):
    """Item, category and user-profile tables sharing one init stream."""

    def __init__(self, n_items, n_categories, other_vocab, item_dim=4, cat_dim=4,
                 other_dim=8, rng=None, std=0.01):
        rng = rng if rng is not None else nx.Rng(0)
        self.item = EmbeddingTable(n_items + 1, item_dim, rng, std, "item")
        self.category = EmbeddingTable(n_categories + 1, cat_dim, rng, std, "category")
        self.others = [EmbeddingTable(v + 1, other_dim, rng, std, f"other[{j}]")
                       for j, v in enumerate(other_vocab)]

    @property
    def d(self):
        return self.item.dim + self.category.dim

    @property
    def d_other(self):
        return sum(t.dim for t in self.others)


def init_tables(n_items, n_categories, other_vocab, item_dim=4, cat_dim=4, other_dim=8,
                rng=None):
    """Fresh tables with entries drawn from N(0, 0.01²); row 0 is zero."""
    return FeatureTables(n_items, n_categories, other_vocab, item_dim, cat_dim,
                         other_dim, rng=rng)


@dataclass
class BatchIds:
    """Integer view of a mini-batch, front-padded to length ``l``."""

    hist_item: np.ndarray  # (B, l)
    hist_cat: np.ndarray
    mask: np.ndarray  # (B, l) bool
    target_item: np.ndarray  # (B,)
    target_cat: np.ndarray
    other: np.ndarray  # (B, n_other)
    labels: np.ndarray  # (B,) float
    index: np.ndarray  # (B,) example index within its dataset

    def __len__(self):
        return len(self.labels)


def collate(examples, l, n_other=None, indices=None):
    B = len(examples)
    if n_other is None:
        n_other = len(examples[0].other) if B else 0
    hist_item = np.zeros((B, l), dtype=np.int64)
    hist_cat = np.zeros((B, l), dtype=np.int64)
    other = np.zeros((B, n_other), dtype=np.int64)
    target = np.zeros((B, 2), dtype=np.int64)
    labels = np.zeros(B)
    for b, ex in enumerate(examples):
        n = len(ex.behaviors)
        if n > l:
            raise IngestionError(
                f"example {b}: {n} behaviors exceed the configured length l={l}",
                field="behaviors")
        if len(ex.other) != n_other:
            raise IngestionError(
                f"example {b}: expected {n_other} other ids, got {len(ex.other)}",
                field="other")
        if n:
            seq = np.asarray(ex.behaviors, dtype=np.int64)
            hist_item[b, l - n:] = seq[:, 0]
            hist_cat[b, l - n:] = seq[:, 1]
        other[b] = ex.other
        target[b] = ex.target
        labels[b] = ex.label
    if indices is None:
        indices = np.arange(B)
    return BatchIds(hist_item, hist_cat, hist_item > 0, target[:, 0], target[:, 1],
                    other, labels, np.asarray(indices, dtype=np.int64))


@dataclass
class InputBundle:
    E: nx.Tensor  # (..., l, d)
    E_k: nx.Tensor  # (..., k, d)
    e_s: nx.Tensor  # (..., d)
    e_other: nx.Tensor  # (..., d_o)
    mask: np.ndarray  # (..., l) bool
    mask_k: np.ndarray  # (..., k) bool


def embed(ids, tables, k):
    """Look up a collated batch; padded positions are exactly zero."""
    tables.item.check_ids(ids.hist_item)
    tables.item.check_ids(ids.target_item)
    tables.category.check_ids(ids.hist_cat)
    tables.category.check_ids(ids.target_cat)
    for j, t in enumerate(tables.others):
        t.check_ids(ids.other[:, j])

    l = ids.mask.shape[1]
    keep = ids.mask[..., None].astype(float)
    E = nx.concat([tables.item.lookup(ids.hist_item),
                   tables.category.lookup(ids.hist_cat)], axis=-1) * keep
    E_k = E[:, l - k:, :]
    e_s = nx.concat([tables.item.lookup(ids.target_item),
                     tables.category.lookup(ids.target_cat)], axis=-1)
    if tables.others:
        e_other = nx.concat([t.lookup(ids.other[:, j]) for j, t in enumerate(tables.others)],
                            axis=-1)
    else:
        e_other = nx.Tensor(np.zeros((len(ids), 0)))
    return InputBundle(E, E_k, e_s, e_other, ids.mask, ids.mask[:, l - k:])


def embed_example(ex, tables, l, k):
    """Single-example bundle (E is l×d, E_k is k×d, e_s is d)."""
    bundle = embed(collate([ex], l, n_other=len(tables.others)), tables, k)
    return InputBundle(bundle.E[0], bundle.E_k[0], bundle.e_s[0], bundle.e_other[0],
                       bundle.mask[0], bundle.mask_k[0])
