"""Shared fixtures for gradient checks: flat-vector views of the two losses."""

import numpy as np

from kqgc.conv import LayerState, cf_kinks, cf_loss_and_grad, init_params
from kqgc.graph import KnowledgeGraph, Triple, build_message_graph
from kqgc.transe import EmbeddingTable, corrupt_batch, kge_kinks, kge_loss_and_grad


def random_kg(rng, n=8, r=2, m=14):
    seen = set()
    while len(seen) < m:
        h, t = rng.choice(n, 2, replace=False)
        seen.add((int(h), int(rng.integers(r)), int(t)))
    return build_message_graph(KnowledgeGraph(n, r, [Triple(*x) for x in sorted(seen)]))


def kge_problem(rng, H, n=6, r=2, batch=4, ratio=2, margin=1.0):
    """Return ``(loss_eval, kinks, x0)`` over the flattened (entities, relations)."""
    kg = random_kg(rng, n, r, batch + 2)
    pos = kg.triple_array()[:batch]
    neg = corrupt_batch(np.repeat(pos, ratio, axis=0), rng, n)
    # scale keeps most hinges active so the gradient is non-trivial
    ent = rng.normal(0, 1.0, size=(n, H))
    rel = rng.normal(0, 1.0, size=(r, H))
    split = n * H

    def table(x):
        return EmbeddingTable(x[:split].reshape(n, H), x[split:].reshape(r, H))

    def loss_eval(x):
        loss, g = kge_loss_and_grad(table(x), pos, neg, margin)
        ge, gr = g.dense(n, r)
        return loss, np.concatenate([ge.ravel(), gr.ravel()])

    def kinks(x):
        return kge_kinks(table(x), pos, neg, margin)

    return loss_eval, kinks, np.concatenate([ent.ravel(), rel.ravel()])


def cf_problem(rng, H, aggregator, normalization="ratio", layers=1, n=8, margin=1.0):
    """Return ``(loss_eval, kinks, x0)`` over the flattened convolution parameters."""
    kg = random_kg(rng, n, 2, 14)
    state = LayerState(rng.normal(size=(n, H)), rng.normal(size=(2, H)))
    params = init_params([H] * (layers + 1), aggregator, rng, normalization=normalization)
    users, items = np.arange(n // 2), np.arange(n // 2, n)
    pos = np.stack([rng.choice(users, 3), rng.choice(items, 3)], axis=1)
    neg = np.stack([np.repeat(pos[:, 0], 2), rng.choice(items, 6)], axis=1)

    def loss_eval(x):
        loss, g = cf_loss_and_grad(kg, state, params.with_flat(x), pos, neg, 0, margin)
        return loss, g.flat()

    def kinks(x):
        return cf_kinks(kg, state, params.with_flat(x), pos, neg, 0, margin)

    return loss_eval, kinks, params.flat()
