import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kqgc.checkpoint import (
    MAGIC, CheckpointFormatError, load_embeddings, load_params, read_sidecar, save_embeddings,
    save_params,
)
from kqgc.conv import KqgcParams, LayerParams, init_params
from kqgc.pipeline import export_embeddings, import_tsv
from kqgc.transe import EmbeddingTable

# any float64 bit pattern except NaN payload differences, which array_equal cannot see
floats = st.floats(allow_nan=False, width=64)


def _same_bits(a, b):
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6).flatmap(lambda h: st.tuples(
    arrays(np.float64, st.tuples(st.integers(0, 5), st.just(h)), elements=floats),
    arrays(np.float64, st.tuples(st.integers(0, 3), st.just(h)), elements=floats))))
def test_embedding_round_trip_bit_exact(tmp_path_factory, mats):
    ent, rel = mats
    path = tmp_path_factory.mktemp("ck") / "e.kqgc"
    save_embeddings(EmbeddingTable(ent, rel), path)
    back = load_embeddings(path)
    assert _same_bits(back.entities, ent) and _same_bits(back.relations, rel)
    assert back.entities.shape == ent.shape and back.relations.shape == rel.shape


def test_layout_is_little_endian(tmp_path):
    path = save_embeddings(EmbeddingTable(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])), tmp_path / "e.kqgc")
    buf = path.read_bytes()
    assert buf[:4] == MAGIC
    assert struct.unpack("<QQQQ", buf[4:36]) == (1, 1, 1, 2)
    assert np.frombuffer(buf[36:], "<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


@pytest.mark.parametrize("agg", ["mean", "attn_dot", "attn_learned"])
@pytest.mark.parametrize("norm", ["ratio", "softmax"])
def test_params_round_trip_bit_exact(tmp_path, agg, norm):
    p = init_params([5, 4, 3], agg, np.random.default_rng(1), leaky_slope=0.2, normalization=norm)
    save_params(p, tmp_path / "p.kqgc")
    back = load_params(tmp_path / "p.kqgc")
    assert len(back.layers) == 2
    for a, b in zip(p.layers, back.layers):
        assert (a.aggregator, a.normalization, a.leaky_slope) == (b.aggregator, b.normalization, b.leaky_slope)
        assert _same_bits(a.W, b.W) and _same_bits(a.b, b.b)
        assert (a.a is None) == (b.a is None)
        if a.a is not None:
            assert _same_bits(a.a, b.a)
    save_params(back, tmp_path / "q.kqgc")
    assert (tmp_path / "p.kqgc").read_bytes() == (tmp_path / "q.kqgc").read_bytes()


def _corrupt(path, offset, data):
    buf = bytearray(path.read_bytes())
    buf[offset:offset + len(data)] = data
    path.write_bytes(bytes(buf))


@pytest.mark.parametrize("kind", ["emb", "params"])
def test_bad_magic_and_version_rejected(tmp_path, kind):
    path = tmp_path / "x.kqgc"
    if kind == "emb":
        save_embeddings(EmbeddingTable(np.eye(2), np.ones((1, 2))), path)
        load = load_embeddings
    else:
        save_params(KqgcParams([LayerParams(np.eye(2), np.zeros(2))]), path)
        load = load_params
    good = path.read_bytes()
    _corrupt(path, 0, b"KQGX")
    with pytest.raises(CheckpointFormatError, match="magic"):
        load(path)
    path.write_bytes(good)
    _corrupt(path, 4, struct.pack("<Q", 2))
    with pytest.raises(CheckpointFormatError, match="version"):
        load(path)
    path.write_bytes(good[:-3])
    with pytest.raises(CheckpointFormatError):
        load(path)
    path.write_bytes(good + b"\0" * 8)
    with pytest.raises(CheckpointFormatError):
        load(path)


def test_sidecar(tmp_path):
    path = save_embeddings(EmbeddingTable(np.eye(2), np.ones((1, 2))), tmp_path / "e.kqgc",
                           config={"dim": 2, "seed": 7})
    assert read_sidecar(path) == {"dim": "2", "seed": "7"}
    assert read_sidecar(tmp_path / "missing.kqgc") == {}


def test_export_import(tmp_path):
    rng = np.random.default_rng(0)
    table = EmbeddingTable(rng.normal(size=(6, 3)), rng.normal(size=(2, 3)))
    src = save_embeddings(table, tmp_path / "final.kqgc")
    tsv = export_embeddings(src, tmp_path / "out", "tsv")
    assert tsv.read_text().splitlines()[0].split("\t")[0] == "0"
    back = import_tsv(tsv, table.relations)
    assert _same_bits(back.entities, table.entities)
    binp = export_embeddings(src, tmp_path / "out", "bin")
    assert binp.read_bytes() == src.read_bytes()
    with pytest.raises(ValueError):
        export_embeddings(src, tmp_path / "out", "csv")
