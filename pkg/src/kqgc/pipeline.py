"""Pipeline stages: generate, pre-train, convolve, evaluate, export.

Every stage reads and writes files under ``cfg.out`` so stages can run as
separate processes. Output layout::

    kg.tsv labels.tsv baseline.tsv gen.cfg
    kge/epoch_000100.kqgc ... kge/final.kqgc kge/loss.tsv
    kqgc/<aggregator>/params.kqgc kqgc/<aggregator>/embeddings.kqgc kqgc/<aggregator>/loss.tsv
    report/report.txt report/metrics.tsv report/pr_curves.csv report/*.png
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import PipelineConfig, format_config
from .conv import PairDataset, canonical_aggregator, init_params, train_kqgc
from .graph import build_message_graph, load_triples, save_triples
from .metrics import ClassifierConfig, pr_auc, predict_proba, smoothing_report, train_linear_classifier
from .synthgen import PURCHASE, generate_cluster_kg, read_features, read_labels, write_features, write_labels
from .transe import EmbeddingTable, train_kge

log = logging.getLogger(__name__)


def kge_dir(cfg: PipelineConfig) -> Path:
    return cfg.out_dir / "kge"


def kqgc_dir(cfg: PipelineConfig, aggregator: str | None = None) -> Path:
    return cfg.out_dir / "kqgc" / canonical_aggregator(aggregator or cfg.aggregator)


def report_dir(cfg: PipelineConfig) -> Path:
    return cfg.out_dir / "report"


def brand_name(k: int) -> str:
    return chr(ord("A") + k) if k < 26 else str(k)


# --- gen ---------------------------------------------------------------------

def run_gen(cfg: PipelineConfig) -> list[Path]:
    spec = cfg.synthetic_spec()
    bench = generate_cluster_kg(spec)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_triples(bench.kg, cfg.path("kg"))
    write_labels(bench, cfg.path("labels"))
    write_features(bench.baseline, bench.users, cfg.path("baseline"))
    gen_cfg = cfg.out_dir / "gen.cfg"
    gen_cfg.write_text(format_config(cfg), encoding="utf-8")
    log.info("wrote %d triples over %d entities to %s", len(bench.kg.triples), bench.kg.num_entities, cfg.out_dir)
    return [cfg.path("kg"), cfg.path("labels"), cfg.path("baseline"), gen_cfg]


def _load_kg(cfg: PipelineConfig):
    path = cfg.path("kg")
    if not path.exists():
        raise FileNotFoundError(f"knowledge graph {path} not found; run 'gen' first")
    return build_message_graph(load_triples(path, id_mode="integer"))


# --- train-kge -----------------------------------------------------------------

def _write_loss(path: Path, losses: list[float], first_epoch: int, keep_before: bool) -> None:
    lines = []
    if keep_before and path.exists():
        for line in path.read_text().splitlines():
            if line and not line.startswith("#") and int(line.split("\t")[0]) < first_epoch:
                lines.append(line)
    lines += [f"{first_epoch + i}\t{v!r}" for i, v in enumerate(losses)]
    path.write_text("# epoch\tloss\n" + "\n".join(lines) + "\n")


def read_loss(path: Path) -> list[float]:
    if not path.exists():
        return []
    return [float(line.split("\t")[1]) for line in path.read_text().splitlines() if line and not line.startswith("#")]


def run_train_kge(cfg: PipelineConfig, resume: str | Path | None = None) -> Path:
    """Train TransE; returns the final checkpoint path.

    ``resume`` points at an earlier checkpoint; training continues from its
    recorded epoch for ``kge_epochs`` more epochs.
    """
    kg = _load_kg(cfg)
    tcfg = cfg.kge_config()
    out = kge_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    meta = cfg.as_dict()

    init, start = None, 0
    if resume is not None:
        init = ckpt.load_embeddings(resume)
        start = int(ckpt.read_sidecar(resume).get("epoch", 0))
        log.info("resuming TransE from %s at epoch %d", resume, start)

    def on_checkpoint(epoch: int, table: EmbeddingTable) -> None:
        ckpt.save_embeddings(table, out / f"epoch_{epoch:06d}.kqgc", {**meta, "epoch": epoch})

    run = train_kge(kg, tcfg, init=init, start_epoch=start, on_checkpoint=on_checkpoint)
    final = ckpt.save_embeddings(run.table, out / "final.kqgc", {**meta, "epoch": run.epoch})
    _write_loss(out / "loss.tsv", run.losses, start + 1, keep_before=resume is not None)
    log.info("TransE done at epoch %d, last loss %.4f", run.epoch, run.losses[-1] if run.losses else float("nan"))
    return final


def kge_input_path(cfg: PipelineConfig) -> Path:
    if cfg.kqgc_input_epoch:
        return kge_dir(cfg) / f"epoch_{cfg.kqgc_input_epoch:06d}.kqgc"
    return kge_dir(cfg) / "final.kqgc"


# --- train-kqgc ----------------------------------------------------------------

def run_train_kqgc(cfg: PipelineConfig, kge_checkpoint=None, resume=None) -> tuple[Path, Path]:
    kg = _load_kg(cfg)
    src = Path(kge_checkpoint) if kge_checkpoint else kge_input_path(cfg)
    if not src.exists():
        raise FileNotFoundError(f"TransE checkpoint {src} not found; run 'train-kge' first")
    table = ckpt.load_embeddings(src)
    if table.num_entities != kg.num_entities or table.num_relations != kg.num_relations:
        raise ValueError(f"{src} does not match the knowledge graph shape")
    tcfg = cfg.kqgc_config()
    out = kqgc_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)

    start = 0
    if resume is not None:
        params0 = ckpt.load_params(resume)
        start = int(ckpt.read_sidecar(resume).get("epoch", 0))
        log.info("resuming KQGC from %s at epoch %d", resume, start)
    else:
        dims = [table.dim] * (cfg.layers + 1)
        params0 = init_params(dims, cfg.aggregator, np.random.default_rng([cfg.seed, 0xC0]),
                              cfg.leaky_slope, cfg.attention_normalization)
    pairs = PairDataset.from_kg(kg, PURCHASE)
    run = train_kqgc(kg, table, pairs, params0, tcfg, start_epoch=start)
    meta = {**cfg.as_dict(), "epoch": run.epoch, "kge_input": str(src)}
    p_path = ckpt.save_params(run.params, out / "params.kqgc", meta)
    e_path = ckpt.save_embeddings(run.state.to_table(), out / "embeddings.kqgc", meta)
    _write_loss(out / "loss.tsv", run.losses, start + 1, keep_before=resume is not None)
    return p_path, e_path


# --- eval ----------------------------------------------------------------------

@dataclass
class EvalTable:
    feature_sets: list[str]
    brands: list[str]
    test: dict[str, dict[str, float]]
    validation: dict[str, dict[str, float]]
    curves: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]]

    def average(self, name: str, split: str = "test") -> float:
        vals = (self.test if split == "test" else self.validation)[name]
        return float(np.mean([vals[b] for b in self.brands]))

    def improvement(self, name: str, baseline: str, brand: str | None = None) -> float:
        if brand is None:
            cand, base = self.average(name), self.average(baseline)
        else:
            cand, base = self.test[name][brand], self.test[baseline][brand]
        return 100.0 * (cand - base) / base


def evaluate_feature_sets(datasets, feature_sets: dict[str, np.ndarray], clf: ClassifierConfig) -> EvalTable:
    """Per-brand PR-AUC of a linear classifier for each feature set.

    ``feature_sets[name]`` is indexed by user entity id. Columns are
    standardized with training-split statistics.
    """
    brands = [brand_name(ds.brand) for ds in datasets]
    test = {n: {} for n in feature_sets}
    val = {n: {} for n in feature_sets}
    curves: dict[str, dict] = {b: {} for b in brands}
    for ds, brand in zip(datasets, brands):
        for name, feats in feature_sets.items():
            u_tr, y_tr = ds.subset("train")
            X = feats[u_tr]
            mu, sd = X.mean(axis=0), X.std(axis=0)
            sd = np.where(sd > 0, sd, 1.0)
            w, b = train_linear_classifier((X - mu) / sd, y_tr, clf)
            for split, store in (("test", test), ("validation", val)):
                u, y = ds.subset(split)
                res = pr_auc(predict_proba((feats[u] - mu) / sd, w, b), y)
                store[name][brand] = res.pr_auc
                if split == "test":
                    curves[brand][name] = (res.recall, res.precision)
    return EvalTable(list(feature_sets), brands, test, val, curves)


def format_report(table: EvalTable, baseline: str, smoothing: dict[str, tuple[float, float]] | None = None) -> str:
    head = f"{'Input features':<18}" + "".join(f"{'Brand ' + b:>17}" for b in table.brands) + f"{'AVG.':>17}"
    lines = ["PR-AUC on the test split (improvement over baseline in %)", head, "-" * len(head)]
    for name in table.feature_sets:
        cells = []
        for b in table.brands + [None]:
            v = table.test[name][b] if b else table.average(name)
            if name == baseline:
                cells.append(f"{v:17.3f}")
            else:
                cells.append(f"{v:.3f} ({table.improvement(name, baseline, b):+.2f})".rjust(17))
        lines.append(f"{name:<18}" + "".join(cells))
    lines.append("")
    lines.append("validation PR-AUC (AVG.): " + ", ".join(
        f"{n} {table.average(n, 'validation'):.3f}" for n in table.feature_sets))
    if smoothing:
        lines.append("")
        lines.append("smoothing (mean query-destination L1 on unit rows / mean neighbor cosine):")
        for name, (dist, cos) in smoothing.items():
            lines.append(f"  {name:<16} {dist:.4f} / {cos:.4f}")
    return "\n".join(lines) + "\n"


def metric_lines(table: EvalTable, baseline: str, smoothing=None) -> list[str]:
    out = []
    for name in table.feature_sets:
        for b in table.brands:
            out.append(f"pr_auc:{name}\t{b}\t{table.test[name][b]!r}")
        out.append(f"pr_auc:{name}\tAVG\t{table.average(name)!r}")
        for b in table.brands:
            out.append(f"val_pr_auc:{name}\t{b}\t{table.validation[name][b]!r}")
        out.append(f"val_pr_auc:{name}\tAVG\t{table.average(name, 'validation')!r}")
        if name != baseline:
            for b in table.brands:
                out.append(f"improvement_pct:{name}\t{b}\t{table.improvement(name, baseline, b)!r}")
            out.append(f"improvement_pct:{name}\tAVG\t{table.improvement(name, baseline)!r}")
    for name, (dist, cos) in (smoothing or {}).items():
        out.append(f"smoothing_distance:{name}\tall\t{dist!r}")
        out.append(f"neighbor_cosine:{name}\tall\t{cos!r}")
    return out


def _user_matrix(features: dict[int, np.ndarray], n: int) -> np.ndarray:
    dim = len(next(iter(features.values())))
    out = np.zeros((n, dim))
    for u, v in features.items():
        out[u] = v
    return out


def run_eval(cfg: PipelineConfig, embeddings: dict[str, Path] | None = None) -> EvalTable:
    """Compare baseline, TransE ⊕ baseline and each trained KQGC ⊕ baseline."""
    labels_path = cfg.path("labels")
    if not labels_path.exists():
        raise FileNotFoundError(f"labels file {labels_path} not found")
    datasets = read_labels(labels_path)
    kg = _load_kg(cfg)
    base_path = cfg.path("baseline")
    if not base_path.exists():
        raise FileNotFoundError(f"baseline features {base_path} not found")
    base = _user_matrix(read_features(base_path), kg.num_entities)

    if embeddings is None:
        embeddings = {}
        if kge_input_path(cfg).exists():
            embeddings["transe"] = kge_input_path(cfg)
        root = cfg.out_dir / "kqgc"
        if root.exists():
            for d in sorted(p for p in root.iterdir() if (p / "embeddings.kqgc").exists()):
                embeddings[f"kqgc_{d.name}"] = d / "embeddings.kqgc"

    feature_sets = {"baseline": base}
    smoothing = {}
    for name, path in embeddings.items():
        table = ckpt.load_embeddings(path)
        feature_sets[name] = np.hstack([table.entities, base])
        sr = smoothing_report(kg, table)
        smoothing[name] = (sr.query_distance, sr.neighbor_cosine)

    clf = ClassifierConfig(cfg.clf_l2, cfg.clf_iterations, cfg.clf_learning_rate)
    result = evaluate_feature_sets(datasets, feature_sets, clf)

    out = report_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(result, "baseline", smoothing), encoding="utf-8")
    (out / "metrics.tsv").write_text("\n".join(metric_lines(result, "baseline", smoothing)) + "\n", encoding="utf-8")
    rows = ["features,brand,rank,precision,recall"]
    for brand, per in result.curves.items():
        for name, (rec, prec) in per.items():
            rows += [f"{name},{brand},{i + 1},{p!r},{r!r}" for i, (p, r) in enumerate(zip(prec, rec))]
    (out / "pr_curves.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    if cfg.figures:
        from . import plotting

        plotting.plot_brand_bars(result.test, out / "pr_auc_by_brand.png")
        plotting.plot_pr_curves(result.curves, out / "pr_curves.png")
        hist = {"TransE": read_loss(kge_dir(cfg) / "loss.tsv")}
        hist = {k: v for k, v in hist.items() if v}
        if hist:
            plotting.plot_loss(hist, out / "kge_loss.png", "TransE pre-training")
        kq = {name: read_loss(Path(p).parent / "loss.tsv") for name, p in embeddings.items() if name.startswith("kqgc_")}
        kq = {k: v for k, v in kq.items() if v}
        if kq:
            plotting.plot_loss(kq, out / "kqgc_loss.png", "KQGC (CF loss)")
    return result


# --- export --------------------------------------------------------------------

def export_embeddings(src, out_dir, fmt: str = "tsv", names: list[str] | None = None) -> Path:
    """Copy an embedding checkpoint as binary or as ``entity_id<TAB>v0...`` TSV."""
    table = ckpt.load_embeddings(src)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(src).stem
    if fmt == "bin":
        return ckpt.save_embeddings(table, out_dir / f"{stem}.kqgc")
    if fmt != "tsv":
        raise ValueError(f"unknown export format {fmt!r}")
    path = out_dir / f"{stem}.tsv"
    lines = []
    for i, row in enumerate(table.entities):
        ident = names[i] if names else str(i)
        lines.append("\t".join([ident] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def import_tsv(path, relations: np.ndarray | None = None) -> EmbeddingTable:
    rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    ent = np.array([[float(v) for v in r[1:]] for r in rows])
    rel = relations if relations is not None else np.zeros((0, ent.shape[1]))
    return EmbeddingTable(ent, rel)


def run_pipeline(cfg: PipelineConfig) -> EvalTable:
    run_gen(cfg)
    run_train_kge(cfg)
    run_train_kqgc(cfg)
    return run_eval(cfg)
