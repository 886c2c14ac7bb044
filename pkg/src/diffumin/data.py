"""Synthetic CTR data with planted multi-interest structure, plus JSONL I/O.

Items are split into ``n_topics`` topics and an item's category id is its
topic. Every user owns a small weighted mixture of topics and behaviors are
drawn from that mixture (or uniformly, for the noise fraction). Each topic
also has a fixed companion topic, half-way around the topic ring. A user's
affinity set is the mixture plus the companions of its non-dominant topics,
and a target is clicked with probability ``q_hi`` inside the affinity set
and ``q_lo`` outside it.

A ``secondary_share`` of all positives are companion targets. Their click
depends on a secondary topic the history does contain while the target's
own topic never shows up there, so ranking behaviors by similarity to the
target cannot find the evidence.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, IdOverflowError, IngestionError, MalformedLineError,
                     MissingKeyError, RecordValueError)
from .features import TrainingExample
from .numerics import Rng

KEYS = ("user_id", "behaviors", "target", "other", "label")

_USER, _EXAMPLE = 1, 2

# share of targets whose topic belongs to the user's affinity set
IN_AFFINITY_RATE = 0.5


@dataclass
class GeneratorConfig:
    n_examples: int = 1000
    n_users: int = 2000
    n_items: int = 1000
    n_topics: int = 8
    mixture_size: int = 3
    mixture_concentration: float = 1.0
    seq_len: int = 200
    min_seq_len: int = 50
    noise_fraction: float = 0.2
    secondary_share: float = 0.4
    q_hi: float = 0.8
    q_lo: float = 0.2
    n_segments: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ConfigError(f"noise_fraction must lie in [0, 1], got {self.noise_fraction}")
        if self.n_topics < 2 or self.n_topics % 2:
            raise ConfigError(f"n_topics must be even and >= 2, got {self.n_topics}")
        if not 1 <= self.mixture_size <= self.n_topics // 2:
            raise ConfigError(f"mixture_size must lie in 1..n_topics/2={self.n_topics // 2}")
        if self.n_items < self.n_topics:
            raise ConfigError("need at least one item per topic")
        if not 0 <= self.min_seq_len <= self.seq_len:
            raise ConfigError("min_seq_len must lie in 0..seq_len")
        if not (0 <= self.q_lo <= 1 and 0 <= self.q_hi <= 1):
            raise ConfigError("click probabilities must lie in [0, 1]")
        dom, sec = self.target_mix()
        if dom < -1e-12 or sec < -1e-12:
            raise ConfigError(
                f"secondary_share={self.secondary_share} unreachable with q_hi={self.q_hi}, "
                f"q_lo={self.q_lo}")
        if self.mixture_size == 1 and sec > 0:
            raise ConfigError("secondary positives need mixture_size >= 2")

    def target_mix(self):
        """(P[target from the dominant topic], P[target is a secondary companion])."""
        positives = IN_AFFINITY_RATE * self.q_hi + (1 - IN_AFFINITY_RATE) * self.q_lo
        if self.q_hi == 0:
            return IN_AFFINITY_RATE, 0.0
        sec = self.secondary_share * positives / self.q_hi
        return IN_AFFINITY_RATE - sec, sec

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown generator keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)


def topic_of(item, n_topics):
    return (np.asarray(item) - 1) % n_topics + 1


def companion(topic, n_topics):
    return (np.asarray(topic) - 1 + n_topics // 2) % n_topics + 1


def _items_in_topic(topic, draws, cfg):
    # items of topic g are g, g + G, g + 2G, ... <= n_items
    count = (cfg.n_items - topic) // cfg.n_topics + 1
    return topic + cfg.n_topics * np.floor(draws * count).astype(np.int64)


@dataclass
class UserProfile:
    topics: np.ndarray  # sorted by weight, dominant first
    weights: np.ndarray
    segment: int
    companions: np.ndarray  # companions of the secondary topics
    affinity: np.ndarray  # mixture plus companions


def user_profile(cfg, user_id):
    rng = Rng(cfg.seed, _USER, user_id)
    # one topic from each of mixture_size distinct companion pairs
    half = cfg.n_topics // 2
    pairs = rng.gen.choice(half, size=cfg.mixture_size, replace=False)
    topics = pairs + 1 + half * rng.integers(0, 2, size=cfg.mixture_size)
    weights = rng.gen.dirichlet(np.full(cfg.mixture_size, cfg.mixture_concentration))
    order = np.argsort(-weights, kind="stable")
    segment = int(rng.integers(1, cfg.n_segments + 1))
    topics = topics[order]
    companions = np.sort(companion(topics[1:], cfg.n_topics))
    return UserProfile(topics, weights[order], segment, companions,
                       np.union1d(topics, companions))


def make_example(cfg, index, profiles=None):
    rng = Rng(cfg.seed, _EXAMPLE, index)
    user = int(rng.integers(0, cfg.n_users))
    prof = profiles[user] if profiles is not None else user_profile(cfg, user)

    n = int(rng.integers(cfg.min_seq_len, cfg.seq_len + 1))
    noise = rng.random(n) < cfg.noise_fraction
    topic = prof.topics[rng.gen.choice(len(prof.topics), size=n, p=prof.weights)]
    topic = np.where(noise, rng.integers(1, cfg.n_topics + 1, size=n), topic)
    items = _items_in_topic(topic, rng.random(n), cfg)
    behaviors = np.stack([items, topic], axis=1).astype(np.int32)

    p_dom, p_sec = cfg.target_mix()
    u = rng.random()
    if u < p_dom:
        t_topic = prof.topics[0]
    elif u < p_dom + p_sec and len(prof.companions):
        t_topic = prof.companions[int(rng.integers(0, len(prof.companions)))]
    else:
        outside = np.setdiff1d(np.arange(1, cfg.n_topics + 1), prof.affinity)
        t_topic = outside[int(rng.integers(0, len(outside)))]
    t_item = int(_items_in_topic(t_topic, rng.random(), cfg))
    q = cfg.q_hi if t_topic in prof.affinity else cfg.q_lo
    label = int(rng.random() < q)
    return TrainingExample(user, behaviors, (t_item, int(t_topic)), [prof.segment], label)


def iter_examples(cfg):
    profiles = [user_profile(cfg, u) for u in range(cfg.n_users)]
    for i in range(cfg.n_examples):
        yield make_example(cfg, i, profiles)


def dumps(ex):
    return json.dumps(ex.to_dict(), separators=(",", ":"))


def generate(cfg, path):
    """Write ``cfg.n_examples`` JSONL records to ``path``; returns the count."""
    n = 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ex in iter_examples(cfg):
                fh.write(dumps(ex))
                fh.write("\n")
                n += 1
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror}") from exc
    return n


def _int_list(value, line, key):
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                              for v in value):
        raise RecordValueError(f"'{key}' must be a list of integers", line=line, field=key)
    return value


def parse_record(obj, line=None, limits=None):
    """Validate one decoded JSON object and build a TrainingExample.

    ``limits`` optionally maps ``n_items``, ``n_categories`` and
    ``other_vocab`` to vocabulary bounds for overflow checks.
    """
    if not isinstance(obj, dict):
        raise MalformedLineError("record is not a JSON object", line=line)
    for key in KEYS:
        if key not in obj:
            raise MissingKeyError(f"missing key '{key}'", line=line, field=key)
    user = obj["user_id"]
    if not isinstance(user, int) or isinstance(user, bool):
        raise RecordValueError("'user_id' must be an integer", line=line, field="user_id")
    label = obj["label"]
    if label not in (0, 1) or isinstance(label, bool):
        raise RecordValueError(f"label must be 0 or 1, got {label!r}", line=line, field="label")
    target = _int_list(obj["target"], line, "target")
    if len(target) != 2:
        raise RecordValueError("'target' must be [item_id, cat_id]", line=line, field="target")
    other = _int_list(obj["other"], line, "other")
    raw = obj["behaviors"]
    if not isinstance(raw, list):
        raise RecordValueError("'behaviors' must be a list", line=line, field="behaviors")
    for pair in raw:
        if len(_int_list(pair, line, "behaviors")) != 2:
            raise RecordValueError("each behavior must be [item_id, cat_id]", line=line,
                                   field="behaviors")
    behaviors = np.asarray(raw, dtype=np.int64).reshape(-1, 2)
    if (behaviors <= 0).any() or min(target) <= 0 or any(o <= 0 for o in other):
        raise RecordValueError("ids must be positive (0 is reserved for padding)", line=line)
    if limits:
        _check_limit(behaviors[:, 0], limits.get("n_items"), "behaviors.item", line)
        _check_limit(behaviors[:, 1], limits.get("n_categories"), "behaviors.category", line)
        _check_limit([target[0]], limits.get("n_items"), "target.item", line)
        _check_limit([target[1]], limits.get("n_categories"), "target.category", line)
        vocab = limits.get("other_vocab")
        if vocab is not None:
            if len(other) != len(vocab):
                raise RecordValueError(f"expected {len(vocab)} other ids, got {len(other)}",
                                       line=line, field="other")
            for j, (o, v) in enumerate(zip(other, vocab)):
                _check_limit([o], v, f"other[{j}]", line)
    return TrainingExample(user, behaviors.astype(np.int32), (target[0], target[1]), other, label)


def _check_limit(ids, limit, name, line):
    if limit is None:
        return
    ids = np.asarray(ids)
    if ids.size and ids.max() > limit:
        raise IdOverflowError(f"{name} id {int(ids.max())} exceeds vocabulary size {limit}",
                              line=line, field=name)


def load(path, limits=None):
    """Yield validated examples in file order."""
    if not os.path.exists(path):
        raise IngestionError(f"dataset not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(f"invalid JSON ({exc.msg})", line=lineno) from None
            yield parse_record(obj, lineno, limits)


def load_all(path, limits=None):
    return list(load(path, limits))


def limits_for(config):
    return {"n_items": config.n_items, "n_categories": config.n_categories,
            "other_vocab": list(config.other_vocab)}


def split(examples, n_train):
    return examples[:n_train], examples[n_train:]
