"""Training, evaluation, ablation runs and numerical self-checks."""

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import GeneratorConfig, iter_examples
from .errors import IdOverflowError, IngestionError, NumericalError
from .features import collate
from .metrics import auc, rela_impr
from .model import VARIANT_NOTES, DiffuMIN, ModelConfig, build_variant

log = logging.getLogger(__name__)

PURPOSE_SHUFFLE = 3
EVAL_STREAM = 1_000_000
EVAL_BATCH = 512


def dataset_hash(path):
    """git-style blob hash (sha1 over ``blob <size>\\0`` + bytes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def params_hash(model):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def check_schema(config, examples):
    """Raise the ingestion error the model would hit on these examples.

    ``line`` in the error is the 1-based position within ``examples``.
    """
    n_other = len(config.other_vocab)
    for i, ex in enumerate(examples):
        seq = np.asarray(ex.behaviors).reshape(-1, 2)
        if len(seq) > config.l:
            raise IngestionError(
                f"{len(seq)} behaviors exceed the model's sequence length l={config.l}",
                line=i + 1, field="behaviors")
        if len(ex.other) != n_other:
            raise IngestionError(f"expected {n_other} other ids, got {len(ex.other)}",
                                 line=i + 1, field="other")
        checks = [(seq[:, 0], config.n_items, "behaviors.item"),
                  (seq[:, 1], config.n_categories, "behaviors.category"),
                  ([ex.target[0]], config.n_items, "target.item"),
                  ([ex.target[1]], config.n_categories, "target.category")]
        checks += [([o], v, f"other[{j}]") for j, (o, v) in enumerate(zip(ex.other,
                                                                          config.other_vocab))]
        for ids, limit, name in checks:
            ids = np.asarray(ids)
            if ids.size and ids.max() > limit:
                raise IdOverflowError(f"{name} id {int(ids.max())} exceeds vocabulary size "
                                      f"{limit}", line=i + 1, field=name)


@dataclass
class TrainResult:
    model: DiffuMIN
    manifest: dict
    history: list = field(default_factory=list)


def batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(config, examples, data_hash=None, validate=True, aux_losses=True, progress=None):
    """One or more epochs of mini-batch Adam over a seeded shuffle.

    Every step runs both diffusion optimization and diffusion sampling.
    Aborts with ``NumericalError`` as soon as the loss is non-finite.
    """
    t0 = time.perf_counter()
    if validate:
        check_schema(config, examples)
    model = DiffuMIN(config)
    params = model.parameters()
    n = len(examples)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = nx.Rng(config.seed, PURPOSE_SHUFFLE, epoch).permutation(n)
        for idx in batches(n, config.batch_size, order):
            ids = collate([examples[i] for i in idx], config.l, len(config.other_vocab),
                          indices=idx)
            res = model.forward(ids, training=True, stream=epoch,
                                aux_losses=aux_losses and len(idx) >= 2)
            losses = res.losses
            if not np.isfinite(losses.total.data).all():
                raise NumericalError(f"non-finite loss at step {step}")
            nx.backward(losses.total)
            nx.adam_step(params, config.lr)
            model.zero_grad()
            history.append(losses.as_floats())
            step += 1
            if progress is not None:
                progress(step, history[-1])
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "lr": config.lr,
        "batch_size": config.batch_size,
        "dataset_hash": data_hash,
        "n_examples": n,
        "steps": step,
        "final_losses": history[-1] if history else None,
        "parameters_hash": params_hash(model),
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    return TrainResult(model, manifest, history)


@dataclass
class Metrics:
    auc: float
    rela_impr: float = None
    n: int = 0
    positive_rate: float = None
    loss_curves: dict = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


def score_examples(model, examples, batch_size=EVAL_BATCH):
    cfg = model.config
    out = np.empty(len(examples))
    for start in range(0, len(examples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(examples)))
        ids = collate([examples[i] for i in idx], cfg.l, len(cfg.other_vocab), indices=idx)
        out[idx] = model.score(ids, stream=EVAL_STREAM)
    return out


def evaluate(model, examples, baseline_auc=None, validate=True):
    """Test-set AUC with evaluation-mode sampling (no diffusion optimization)."""
    if validate:
        check_schema(model.config, examples)
    scores = score_examples(model, examples)
    labels = np.array([ex.label for ex in examples])
    value = auc(scores, labels)
    impr = rela_impr(value, baseline_auc) if baseline_auc is not None else None
    return Metrics(value, impr, len(examples), float(labels.mean()))


# -- ablation -----------------------------------------------------------------


def ablate(config, train_examples, test_examples, variants, seeds=(0,), progress=None):
    """Train and score each variant under shared seeds.

    Returns a dict with one row per variant (mean/min/max AUC over seeds and
    RelaImpr of the mean against the Full row when it was requested).
    """
    rows = []
    for tag in variants:
        aucs = []
        for seed in seeds:
            cfg = dataclasses.replace(config, variant=tag, seed=seed)
            result = train(cfg, train_examples, validate=False)
            metrics = evaluate(result.model, test_examples, validate=False)
            aucs.append(metrics.auc)
            if progress is not None:
                progress(tag, seed, metrics.auc)
        rows.append({"variant": tag, "description": VARIANT_NOTES[tag],
                     "auc_mean": float(np.mean(aucs)), "auc_min": float(np.min(aucs)),
                     "auc_max": float(np.max(aucs)), "aucs": aucs})
    full = next((r["auc_mean"] for r in rows if r["variant"] == "Full"), None)
    for row in rows:
        row["rela_impr_vs_full"] = (rela_impr(row["auc_mean"], full)
                                    if full is not None and full != 0.5 else None)
    return {"seeds": list(seeds), "rows": rows}


def format_table(result):
    header = ["variant", "AUC(mean)", "min", "max", "RelaImpr vs Full", "description"]
    body = []
    for r in result["rows"]:
        impr = r["rela_impr_vs_full"]
        body.append([r["variant"], f"{r['auc_mean']:.4f}", f"{r['auc_min']:.4f}",
                     f"{r['auc_max']:.4f}", "-" if impr is None else f"{impr:.2f}%",
                     r["description"]])
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()
             for row in [header, *body]]
    return "\n".join(lines)


# -- gradient check -------------------------------------------------------------


def micro_config(variant="Full", **overrides):
    """Small model used by the finite-difference check."""
    cfg = dict(n_items=40, n_categories=4, other_vocab=[5], l=16, k=4, channels=2,
               batch_size=2, T=50, T_prime=3, variant=variant, seed=7)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def micro_batch(config, n=None, seed=3):
    n = config.batch_size if n is None else n
    gen = GeneratorConfig(n_examples=n, n_users=8, n_items=config.n_items,
                          n_topics=config.n_categories, mixture_size=2, seq_len=config.l,
                          min_seq_len=config.l // 2, n_segments=config.other_vocab[0],
                          seed=seed)
    examples = list(iter_examples(gen))
    return collate(examples, config.l, len(config.other_vocab), indices=np.arange(n))


@dataclass
class GroupCheck:
    name: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float
    n_entries: int


def _probe_entries(grad, rng, k):
    flat = np.abs(grad).reshape(-1)
    n = flat.size
    if n <= k:
        return np.arange(n)
    top = np.argsort(-flat, kind="stable")[: k // 2]
    rest = rng.choice(n, size=k - len(top), replace=False)
    return np.unique(np.concatenate([top, rest]))


def grad_check(model, ids, h=1e-5, entries_per_group=8, seed=0):
    """Central finite differences against the tape, one row per parameter.

    Frozen intermediates (routing masks, detached interests, samples) are
    replayed from the analytic pass, so both sides differentiate the same
    function. The error is the group-wise ratio ‖analytic − numeric‖ /
    max(‖numeric‖, 1e-8).
    """
    model.zero_grad()
    with nx.recording_frozen() as rec:
        loss = model.forward(ids, training=True).losses.total
    nx.backward(loss)

    def value():
        with nx.no_grad(), nx.replaying_frozen(rec):
            return model.forward(ids, training=True).losses.total.item()

    rng = np.random.default_rng(seed)
    report = []
    for name, p in model.named_parameters():
        analytic = p.grad.copy()
        entries = _probe_entries(analytic, rng, entries_per_group)
        flat = p.data.reshape(-1)
        num = np.empty(len(entries))
        for j, e in enumerate(entries):
            orig = flat[e]
            flat[e] = orig + h
            up = value()
            flat[e] = orig - h
            down = value()
            flat[e] = orig
            num[j] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[entries]
        rel = np.linalg.norm(a - num) / max(np.linalg.norm(num), 1e-8)
        report.append(GroupCheck(name, float(rel), float(np.linalg.norm(a)),
                                 float(np.linalg.norm(num)), len(entries)))
    model.zero_grad()
    return report


# -- embeddings dump and timing ---------------------------------------------------


def dump_embeddings(model, examples, path, batch_size=EVAL_BATCH):
    """Per example: channels O, aggregated r, augmented r*, score and label."""
    cfg = model.config
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for start in range(0, len(examples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(examples)))
            ids = collate([examples[i] for i in idx], cfg.l, len(cfg.other_vocab), indices=idx)
            with nx.no_grad():
                res = model.forward(ids, training=False, stream=EVAL_STREAM)
            for j, i in enumerate(idx):
                rec = {"index": int(i), "user_id": int(examples[i].user_id),
                       "label": int(examples[i].label), "score": float(res.y_hat.data[j]),
                       "channels": res.O.data[j].tolist(), "r": res.r.data[j].tolist(),
                       "r_star": None if res.r_star is None else res.r_star[j].tolist()}
                fh.write(json.dumps(rec, separators=(",", ":")))
                fh.write("\n")
                n += 1
    return n


def time_scoring(config, lengths, n_examples=256, repeats=3, seed=0):
    """Best-of-``repeats`` per-example evaluation time for each sequence length.

    Every example carries a full-length history so the cost tracks ``l``.
    """
    timings = {}
    for l in lengths:
        cfg = ModelConfig(**{**config.to_dict(), "l": l})
        gen = GeneratorConfig(n_examples=n_examples, n_users=64, n_items=cfg.n_items,
                              n_topics=cfg.n_categories, seq_len=l, min_seq_len=l,
                              n_segments=cfg.other_vocab[0], seed=seed)
        examples = list(iter_examples(gen))
        model = build_variant(cfg)
        score_examples(model, examples[:8])
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            score_examples(model, examples, batch_size=cfg.batch_size)
            best = min(best, time.perf_counter() - t0)
        timings[l] = best / n_examples
    return timings
