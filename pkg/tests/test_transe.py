import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kqgc.graph import KnowledgeGraph, Triple
from kqgc.metrics import grad_check
from kqgc.transe import (
    EmbeddingTable, TrainConfig, TrainingDivergedError, batch_loss, corrupt_batch, corrupt_triple,
    init_embeddings, kge_loss_and_grad, normalize_entities, score_triple, train_kge,
)

from helpers import kge_problem

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _table(ent, rel):
    return EmbeddingTable(np.array(ent, dtype=float), np.array(rel, dtype=float))


def test_score_exact_translation():
    emb = _table([[1, 0], [1, 1]], [[0, 1]])
    assert score_triple(emb, Triple(0, 0, 1)) == 0.0


def test_score_hand_value():
    emb = _table([[0, 0], [0.5, -0.5]], [[0, 0]])
    assert score_triple(emb, Triple(0, 0, 1)) == 1.0
    assert score_triple(emb, Triple(0, 0, 1)) == score_triple(emb, Triple(0, 0, 1))


def test_score_index_error():
    emb = _table([[0, 0], [1, 1]], [[0, 0]])
    with pytest.raises(IndexError):
        score_triple(emb, Triple(0, 1, 1))
    with pytest.raises(IndexError):
        score_triple(emb, Triple(0, 0, 2))


def test_corrupt_two_entities():
    rng = np.random.default_rng(0)
    outs = {corrupt_triple(Triple(0, 0, 1), rng, 2) for _ in range(200)}
    assert outs == {Triple(1, 0, 1), Triple(0, 0, 0)}


def test_corrupt_never_keeps_slot():
    rng = np.random.default_rng(3)
    base = np.tile([[4, 2, 7]], (10_000, 1))
    out = corrupt_batch(base, rng, 10)
    changed_h = out[:, 0] != 4
    changed_t = out[:, 2] != 7
    assert np.all(changed_h ^ changed_t)
    assert np.all(out[:, 1] == 2)
    # both sides and every replacement entity occur
    assert 0.45 < changed_h.mean() < 0.55
    assert set(out[changed_h, 0]) == set(range(10)) - {4}


def test_corrupt_seeded_and_errors():
    a = [corrupt_triple(Triple(0, 0, 1), np.random.default_rng(5), 50) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [corrupt_triple(Triple(1, 0, 2), r1, 9) for _ in range(20)] == \
           [corrupt_triple(Triple(1, 0, 2), r2, 9) for _ in range(20)]
    with pytest.raises(ValueError):
        corrupt_triple(Triple(0, 0, 0), np.random.default_rng(0), 1)


def _pair_table(f_pos, f_neg):
    # entity 0 -> 1 is the positive, 0 -> 2 the negative; relation is zero
    return _table([[0, 0], [f_pos, 0], [f_neg, 0]], [[0, 0]])


def test_pair_loss_active():
    emb = _pair_table(0.2, 0.8)
    loss, g = kge_loss_and_grad(emb, [[0, 0, 1]], [[0, 0, 2]], 1.0)
    assert loss == pytest.approx(0.4, abs=1e-12)
    ge, gr = g.dense(3, 1)
    # d/de_t of |e_h - e_t| is -sign(e_h - e_t) = +1 on the first coordinate
    assert ge[1, 0] == 1.0 and ge[2, 0] == -1.0
    assert ge[0, 0] == 0.0 and gr[0, 0] == 0.0


def test_pair_loss_inactive():
    emb = _pair_table(0.1, 2.0)
    loss, g = kge_loss_and_grad(emb, [[0, 0, 1]], [[0, 0, 2]], 1.0)
    assert loss == 0.0
    assert len(g.entity_rows) == 0 and len(g.relation_rows) == 0


def test_untouched_rows_get_no_update():
    emb = _pair_table(0.2, 0.8)
    emb = EmbeddingTable(np.vstack([emb.entities, [[5.0, 5.0]]]), emb.relations)
    _, g = kge_loss_and_grad(emb, [[0, 0, 1]], [[0, 0, 2]], 1.0)
    assert 3 not in g.entity_rows


def test_mismatched_batches():
    emb = _pair_table(0.2, 0.8)
    with pytest.raises(ValueError):
        kge_loss_and_grad(emb, [[0, 0, 1], [0, 0, 2]], [[0, 0, 2]], 1.0)


@pytest.mark.parametrize("H", [2, 4, 5, 10])
def test_gradient_matches_finite_differences(H):
    rng = np.random.default_rng(H)
    for _ in range(5):
        loss_eval, kinks, x0 = kge_problem(rng, H)
        res = grad_check(loss_eval, x0, step=1e-5, tol=1e-4, kinks=kinks)
        assert res.checked > 0 and res.passed, res


def test_normalize_examples():
    emb = normalize_entities(_table([[3, 4], [0, 0]], [[7, 7]]))
    assert np.allclose(emb.entities, [[0.6, 0.8], [1.0, 0.0]], atol=1e-15)
    assert np.array_equal(emb.relations, [[7, 7]])
    unit = np.array([[0.6, 0.8]])
    assert np.allclose(normalize_entities(_table(unit, [[0, 0]])).entities, unit, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5, 3), elements=finite))
def test_normalize_gives_unit_rows(ent):
    emb = normalize_entities(EmbeddingTable(ent, np.zeros((1, 3))))
    assert np.allclose(np.linalg.norm(emb.entities, axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 2), elements=finite), arrays(float, (2, 2), elements=finite),
       st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_hinge_nonnegative_and_homogeneous(ent, rel, margin, c):
    emb = EmbeddingTable(ent, rel)
    pos = np.array([[0, 0, 1], [2, 1, 3]])
    neg = np.array([[0, 0, 3], [1, 1, 3]])
    loss = batch_loss(emb, pos, neg, margin)
    assert loss >= 0
    # scaling entities, relations and the margin together scales the loss
    scaled = batch_loss(EmbeddingTable(c * ent, c * rel), pos, neg, c * margin)
    assert scaled == pytest.approx(c * loss, rel=1e-9, abs=1e-9)


def test_satisfied_triple_far_negative_contributes_nothing():
    emb = _table([[1, 0], [1, 1], [-3, -3]], [[0, 1]])
    loss, g = kge_loss_and_grad(emb, [[0, 0, 1]], [[0, 0, 2]], 1.0)
    assert loss == 0.0 and len(g.entity_rows) == 0


def test_init_bounds_and_norms():
    emb = init_embeddings(50, 4, 9, np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(emb.entities, axis=1), 1.0)
    assert np.abs(emb.relations).max() <= 1.0
    assert np.allclose(np.linalg.norm(emb.relations, axis=1), 1.0)


def _one_triple_kg():
    return KnowledgeGraph(2, 1, [Triple(0, 0, 1)])


@pytest.mark.parametrize("seed", range(3))
def test_single_triple_is_fitted(seed):
    # With two entities every corruption scores |e_r|_1, so training stops once
    # |e_r|_1 - f(pos) reaches the margin; f(pos) itself need not reach 0.
    kg = _one_triple_kg()
    cfg = TrainConfig(epochs=200, dim=4, learning_rate=0.01, seed=seed)
    start = train_kge(kg, TrainConfig(epochs=0, dim=4, seed=seed)).table
    run = train_kge(kg, cfg)
    f_pos = score_triple(run.table, Triple(0, 0, 1))
    assert f_pos < score_triple(start, Triple(0, 0, 1))
    assert run.losses[-1] == 0.0
    assert np.abs(run.table.relations).sum() >= 1.0 + f_pos - 1e-12
    assert all(x >= 0 for x in run.losses)


def _small_kg():
    rng = np.random.default_rng(0)
    trip = {(int(h), int(r), int(t)) for h, r, t in zip(rng.integers(0, 20, 80), rng.integers(0, 3, 80),
                                                       rng.integers(0, 20, 80)) if h != t}
    return KnowledgeGraph(20, 3, [Triple(*x) for x in sorted(trip)])


def test_training_is_deterministic_and_normalized():
    cfg = TrainConfig(epochs=10, dim=6, batch_size=16, seed=4, checkpoint_every=5, neg_ratio=2)
    a = train_kge(_small_kg(), cfg)
    b = train_kge(_small_kg(), cfg)
    assert np.array_equal(a.table.entities, b.table.entities)
    assert np.array_equal(a.table.relations, b.table.relations)
    assert sorted(a.checkpoints) == [5, 10]
    for snap in a.checkpoints.values():
        assert np.allclose(np.linalg.norm(snap.entities, axis=1), 1.0, atol=1e-6)


def test_resume_equals_uninterrupted_run():
    kg = _small_kg()
    full = train_kge(kg, TrainConfig(epochs=8, dim=5, batch_size=16, seed=2))
    first = train_kge(kg, TrainConfig(epochs=3, dim=5, batch_size=16, seed=2))
    rest = train_kge(kg, TrainConfig(epochs=5, dim=5, batch_size=16, seed=2), init=first.table, start_epoch=3)
    assert rest.epoch == 8
    assert np.array_equal(full.table.entities, rest.table.entities)
    assert full.losses == first.losses + rest.losses


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_zero_epochs_and_divergence():
    kg = _one_triple_kg()
    run = train_kge(kg, TrainConfig(epochs=0, dim=3, seed=1))
    assert run.losses == [] and run.epoch == 0
    bad = EmbeddingTable(np.array([[np.inf, 0, 0], [0, 1, 0]]), np.zeros((1, 3)))
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train_kge(kg, TrainConfig(epochs=1, dim=3, normalize_entities=False), init=bad)


def test_config_validation():
    for kw in ({"margin": 0}, {"learning_rate": -1}, {"dim": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    with pytest.raises(ValueError):
        train_kge(KnowledgeGraph(2, 1, []), TrainConfig())
