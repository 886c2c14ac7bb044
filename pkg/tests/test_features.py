import numpy as np
import pytest

from diffumin import numerics as nx
from diffumin.errors import IdOverflowError, IngestionError
from diffumin.features import (TrainingExample, collate, embed, embed_example, init_tables)
from diffumin.model import DiffuMIN
from diffumin.harness import micro_config


def tables(seed=0, **kw):
    args = dict(n_items=20, n_categories=5, other_vocab=[3])
    args.update(kw)
    return init_tables(**args, rng=nx.Rng(seed))


def test_empty_history_is_all_padding():
    b = embed_example(TrainingExample(1, [], (3, 2), [1], 0), tables(), l=4, k=2)
    assert np.all(b.E.data == 0) and np.all(b.E_k.data == 0)
    assert not b.mask.any() and not b.mask_k.any()


def test_single_behavior_sits_in_last_row():
    b = embed_example(TrainingExample(1, [(5, 2)], (3, 2), [1], 0), tables(), l=4, k=2)
    assert b.mask.tolist() == [False, False, False, True]
    np.testing.assert_array_equal(b.E_k.data[1], b.E.data[3])
    np.testing.assert_array_equal(b.E_k.data[0], 0.0)


def test_dimension_is_item_plus_category():
    t = tables()
    b = embed_example(TrainingExample(1, [(5, 2)], (3, 2), [1], 0), t, l=4, k=2)
    assert t.d == 8 and b.E.shape == (4, 8) and b.e_s.shape == (8,)
    assert b.e_other.shape == (8,)


def test_behavior_row_is_item_then_category_embedding():
    t = tables()
    b = embed_example(TrainingExample(1, [(5, 2), (7, 4)], (3, 1), [2], 0), t, l=3, k=2)
    np.testing.assert_array_equal(b.E.data[2], np.concatenate([t.item.weights.data[7],
                                                               t.category.weights.data[4]]))
    np.testing.assert_array_equal(b.e_s.data, np.concatenate([t.item.weights.data[3],
                                                              t.category.weights.data[1]]))
    np.testing.assert_array_equal(b.e_other.data, t.others[0].weights.data[2])


def test_short_window_takes_last_k_rows():
    seq = [(i + 1, 1 + i % 5) for i in range(6)]
    b = embed_example(TrainingExample(1, seq, (3, 2), [1], 0), tables(), l=8, k=3)
    np.testing.assert_array_equal(b.E_k.data, b.E.data[-3:])


def test_item_overflow_names_field():
    with pytest.raises(IdOverflowError) as err:
        embed_example(TrainingExample(1, [(21, 2)], (3, 2), [1], 0), tables(), l=4, k=2)
    assert err.value.field == "item"


def test_category_overflow_names_field():
    with pytest.raises(IdOverflowError) as err:
        embed_example(TrainingExample(1, [(2, 2)], (3, 6), [1], 0), tables(), l=4, k=2)
    assert err.value.field == "category"


def test_sequence_longer_than_l_rejected():
    with pytest.raises(IngestionError):
        collate([TrainingExample(1, [(1, 1)] * 5, (3, 2), [1], 0)], l=4)


def test_padding_row_zero_after_init():
    t = tables()
    for table in [t.item, t.category, *t.others]:
        np.testing.assert_array_equal(table.weights.data[0], 0.0)


def test_init_deterministic():
    a, b = tables(seed=5), tables(seed=5)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_init_std():
    t = init_tables(100_000, 1, [1], item_dim=1, rng=nx.Rng(1))
    w = t.item.weights.data[1:, 0]
    assert abs(w.std() - 0.01) < 0.001


def test_padding_row_stays_zero_under_training():
    t = tables()
    ids = collate([TrainingExample(1, [(5, 2)], (3, 2), [1], 1)], l=4)
    b = embed(ids, t, k=2)
    loss = nx.sum_(nx.square(b.E)) + nx.sum_(b.e_s) + nx.sum_(b.e_other)
    nx.backward(loss)
    nx.adam_step(t.parameters(), 0.1)
    np.testing.assert_array_equal(t.item.weights.data[0], 0.0)
    np.testing.assert_array_equal(t.category.weights.data[0], 0.0)


def test_update_to_one_id_leaves_other_rows():
    t = tables()
    before = t.item.weights.data.copy()
    ids = collate([TrainingExample(1, [(5, 2)], (3, 2), [1], 1)], l=4)
    nx.backward(nx.sum_(embed(ids, t, k=2).e_s))
    nx.adam_step(t.parameters(), 0.1)
    changed = np.flatnonzero(np.any(t.item.weights.data != before, axis=1))
    assert changed.tolist() == [3]


def test_extra_padding_leaves_interests_unchanged():
    cfg = micro_config("Full", l=16)
    model = DiffuMIN(cfg)
    rng = np.random.default_rng(0)
    examples = [TrainingExample(1, [(int(i), int(c)) for i, c in
                                    zip(rng.integers(1, 41, 10), rng.integers(1, 5, 10))],
                                (4, 2), [1], 1) for _ in range(2)]
    short = embed(collate(examples, 10, 1), model.tables, cfg.k)
    long = embed(collate(examples, 16, 1), model.tables, cfg.k)
    r_short = model.omie(short.E, short.e_s, short.mask).r.data
    r_long = model.omie(long.E, long.e_s, long.mask).r.data
    np.testing.assert_allclose(r_short, r_long, atol=1e-12)
