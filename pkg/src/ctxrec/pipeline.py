"""Stage orchestration over immutable, content-addressed artifacts.

Every stage writes into ``<workdir>/<stage>-<config_hash[:12]>/`` together
with a ``meta.json`` recording the full config snapshot and its hash. A stage
re-run with the same config reuses the existing artifact; it never overwrites
one. Downstream stages refuse artifacts whose recorded hash does not match
the active config.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np

from . import cluster as cluster_mod
from . import graph as graph_mod
from . import nextitem as next_mod
from . import predictor as pred_mod
from .config import PipelineConfig
from .corpus import SplitCorpus, build_corpus, load_corpus, parse_log, save_corpus, ColumnSchema, TEST
from .metrics import EvalReport, mrr, recall_at_k, t_test_one_tailed
from .nn.checkpoint import load_checkpoint, save_checkpoint


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    def __init__(self, stage: str):
        super().__init__(f"missing artifact for stage '{stage}': run '{stage}' first")
        self.stage = stage


class Workspace:
    def __init__(self, cfg: PipelineConfig, workdir: str | Path):
        cfg.validate()
        if cfg.threads != 1:
            import warnings
            warnings.warn("only threads=1 is implemented; running single-threaded")
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)

    @property
    def config_hash(self) -> str:
        return self.cfg.config_hash()

    def stage_dir(self, stage: str) -> Path:
        return self.workdir / f"{stage}-{self.config_hash[:12]}"

    def begin(self, stage: str) -> tuple[Path, bool]:
        """(stage dir, reuse?). Reuse only when a verified meta already exists."""
        path = self.stage_dir(stage)
        if (path / "meta.json").exists():
            self._verify_meta(stage, path)
            return path, True
        path.mkdir(parents=True, exist_ok=True)
        return path, False

    def finish(self, stage: str, path: Path, extra: dict | None = None) -> None:
        meta = {"stage": stage, "config_hash": self.config_hash,
                "config": json.loads(json.dumps(_cfg_dict(self.cfg)))}
        if extra:
            meta.update(extra)
        (path / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n")

    def require(self, stage: str) -> Path:
        path = self.stage_dir(stage)
        if not (path / "meta.json").exists():
            raise MissingArtifactError(stage)
        self._verify_meta(stage, path)
        return path

    def _verify_meta(self, stage: str, path: Path) -> None:
        meta = json.loads((path / "meta.json").read_text())
        if meta.get("config_hash") != self.config_hash:
            raise PipelineError(
                f"artifact {path} was built with config hash "
                f"{meta.get('config_hash')!r}, expected {self.config_hash!r}; "
                "refusing a mismatched artifact chain")


def _cfg_dict(cfg: PipelineConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(cfg)


def _sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# ingest

def run_ingest(ws: Workspace, input_path: str | Path, delimiter: str = ",",
               has_header: bool = False, on_error: str = "abort") -> Path:
    input_sha = _sha256_file(input_path)
    path, reuse = ws.begin("ingest")
    if reuse:
        meta = json.loads((path / "meta.json").read_text())
        if meta.get("input_sha256") != input_sha:
            raise PipelineError(
                f"{path} holds a corpus built from different input data; "
                "artifacts are immutable - use a fresh workdir")
        return path
    schema = ColumnSchema(delimiter=delimiter, has_header=has_header)
    parsed = parse_log(Path(input_path), schema, on_error=on_error)
    corpus = build_corpus(parsed, idle_threshold=ws.cfg.idle_threshold_s,
                          min_count=ws.cfg.min_user_interactions)
    save_corpus(corpus, path / "corpus.jsonl")
    n_sessions = corpus.num_sessions
    avg_len = (len(corpus.interactions) / n_sessions) if n_sessions else 0.0
    ws.finish("ingest", path, {
        "input_sha256": input_sha,
        "num_users": corpus.num_users,
        "num_items": corpus.num_items,
        "num_interactions": len(corpus.interactions),
        "num_sessions": n_sessions,
        "avg_session_length": avg_len,
    })
    return path


def load_ingested(ws: Workspace) -> SplitCorpus:
    return load_corpus(ws.require("ingest") / "corpus.jsonl")


# ---------------------------------------------------------------------------
# embed

def run_embed(ws: Workspace) -> Path:
    corpus = load_ingested(ws)
    path, reuse = ws.begin("embed")
    if reuse:
        return path
    cfg = ws.cfg
    graph = graph_mod.build_graph_from_corpus(corpus)
    encoder, history = graph_mod.train_encoder(
        graph, base_dim=cfg.graph_base_dim, out_dim=cfg.session_emb_dim,
        epochs=cfg.graph_epochs, batch_size=cfg.graph_batch,
        fanout=(cfg.graph_fanout1, cfg.graph_fanout2),
        num_negatives=cfg.graph_negatives, lr=cfg.graph_lr,
        clip_norm=cfg.clip_norm, seed=cfg.seed)

    embeddings = np.zeros((corpus.num_sessions, cfg.session_emb_dim))
    embeddable = np.zeros(corpus.num_sessions, dtype=bool)
    in_graph = encoder.embed_all_sessions(graph)
    for node, sid in enumerate(graph.session_ids):
        embeddings[sid] = in_graph[node]
        embeddable[sid] = True
    for s in corpus.sessions:
        if embeddable[s.session_id]:
            continue
        try:
            embeddings[s.session_id] = encoder.embed_new_session(graph, list(s.items))
            embeddable[s.session_id] = True
        except ValueError:
            pass  # stays a zero vector; contextualize leaves it unlabeled

    save_checkpoint(path / "encoder.ckpt",
                    {p.name: p.value for p in encoder.params()},
                    config={"num_items": graph.num_items,
                            "base_dim": cfg.graph_base_dim,
                            "out_dim": cfg.session_emb_dim,
                            "fanout": [cfg.graph_fanout1, cfg.graph_fanout2]})
    np.savez(path / "embeddings.npz", embeddings=embeddings,
             embeddable=embeddable, graph_session_ids=graph.session_ids)
    graph_mod.export_embeddings_csv(path / "embeddings.csv", corpus, embeddings)
    ws.finish("embed", path, {"holdout_loss": history["holdout_loss"]})
    return path


def load_encoder(ws: Workspace):
    corpus = load_ingested(ws)
    path = ws.require("embed")
    ck = load_checkpoint(path / "encoder.ckpt")
    graph = graph_mod.build_graph_from_corpus(corpus)
    encoder = graph_mod.SageEncoder(
        ck.config["num_items"], ck.config["base_dim"], ck.config["out_dim"],
        tuple(ck.config["fanout"]))
    for p in encoder.params():
        p.value[...] = ck.tensors[p.name]
    data = np.load(path / "embeddings.npz")
    return corpus, graph, encoder, data["embeddings"], data["embeddable"]


# ---------------------------------------------------------------------------
# contextualize

def run_contextualize(ws: Workspace) -> Path:
    corpus, graph, encoder, embeddings, _ = load_encoder(ws)
    path, reuse = ws.begin("contextualize")
    if reuse:
        return path
    cfg = ws.cfg
    model = cluster_mod.kmeans_fit(embeddings[graph.session_ids],
                                   num_contexts=cfg.num_contexts,
                                   max_iters=cfg.kmeans_max_iters,
                                   seed=cfg.seed,
                                   session_ids=graph.session_ids,
                                   n_init=cfg.kmeans_n_init)
    labels = cluster_mod.label_all(model, encoder, graph, corpus, strict=False)
    np.savez(path / "contexts.npz", centers=model.centers,
             train_session_ids=model.session_ids, train_labels=model.labels,
             labels=labels,
             inertia_history=np.asarray(model.inertia_history))
    cluster_mod.export_clusters_csv(path / "clusters.csv", model, corpus,
                                    labels, embeddings)
    ws.finish("contextualize", path, {
        "inertia_first": model.inertia_history[0],
        "inertia_last": model.inertia_history[-1],
        "num_unlabeled": int((labels == cluster_mod.UNLABELED).sum()),
    })
    return path


def load_contexts(ws: Workspace):
    path = ws.require("contextualize")
    data = np.load(path / "contexts.npz")
    model = cluster_mod.ContextModel(
        centers=data["centers"], session_ids=data["train_session_ids"],
        labels=data["train_labels"],
        inertia_history=list(data["inertia_history"]))
    return model, data["labels"]


# ---------------------------------------------------------------------------
# train-context

def _predictor_ckpt_config(ws: Workspace, corpus: SplitCorpus, feat_dim: int) -> dict:
    cfg = ws.cfg
    return {"num_users": corpus.num_users, "num_items": corpus.num_items,
            "num_contexts": cfg.num_contexts, "feat_dim": feat_dim,
            "user_dim": cfg.user_dim, "item_dim": cfg.item_dim,
            "hidden": cfg.lstm_hidden, "max_seq_len": cfg.max_seq_len}


def run_train_context(ws: Workspace) -> Path:
    corpus, graph, encoder, embeddings, _ = load_encoder(ws)
    _, labels = load_contexts(ws)
    path, reuse = ws.begin("train-context")
    if reuse:
        return path
    cfg = ws.cfg
    features = pred_mod.build_session_features(corpus, embeddings)
    rng = np.random.default_rng(cfg.seed)
    model = pred_mod.ContextPredictor(
        corpus.num_users, corpus.num_items, cfg.num_contexts, features.dim,
        cfg.user_dim, cfg.item_dim, cfg.lstm_hidden, cfg.max_seq_len, rng)
    history = pred_mod.train_context(
        model, corpus, features, labels, rng, lr=cfg.lr, batch_size=cfg.batch,
        max_epochs=cfg.max_epochs, patience=cfg.patience,
        clip_norm=cfg.clip_norm, max_seq_len=cfg.max_seq_len)
    topk_ids, topk_probs = pred_mod.predict_all_prefixes(
        model, corpus, features, cfg.top_k_contexts, cfg.max_seq_len)

    save_checkpoint(path / "predictor.ckpt",
                    {p.name: p.value for p in model.params()},
                    config=_predictor_ckpt_config(ws, corpus, features.dim))
    np.savez(path / "predictions.npz", topk_ids=topk_ids, topk_probs=topk_probs)
    pred_mod.export_predictions_csv(path / "predictions.csv", corpus,
                                    topk_ids, topk_probs)
    ws.finish("train-context", path, {
        "epochs_run": len(history["train_loss"]),
        "best_epoch": history["best_epoch"],
        "final_val_loss": history["val_loss"][-1] if history["val_loss"] else None,
    })
    return path


def load_context_predictor(ws: Workspace):
    path = ws.require("train-context")
    ck = load_checkpoint(path / "predictor.ckpt")
    c = ck.config
    model = pred_mod.ContextPredictor(
        c["num_users"], c["num_items"], c["num_contexts"], c["feat_dim"],
        c["user_dim"], c["item_dim"], c["hidden"], c["max_seq_len"])
    for p in model.params():
        p.value[...] = ck.tensors[p.name]
    preds = np.load(path / "predictions.npz")
    return model, preds["topk_ids"], preds["topk_probs"]


# ---------------------------------------------------------------------------
# train-next / evaluate / ablate

def _next_stage_name(mode: str) -> str:
    return "train-next" if mode == next_mod.WITH_CONTEXT else "train-next-ablation"


def _build_next_model(ws: Workspace, corpus: SplitCorpus, mode: str,
                      rng: np.random.Generator) -> next_mod.NextItemModel:
    cfg = ws.cfg
    return next_mod.NextItemModel(
        corpus.num_users, corpus.num_items, cfg.num_contexts, cfg.user_dim,
        cfg.item_dim, cfg.context_dim, cfg.lstm_hidden, cfg.top_k_contexts,
        cfg.max_seq_len, mode, rng)


def _train_next_once(ws: Workspace, corpus: SplitCorpus,
                     ctx_topk: np.ndarray | None, mode: str,
                     seed: int) -> tuple[next_mod.NextItemModel, dict]:
    cfg = ws.cfg
    rng = np.random.default_rng(seed)
    model = _build_next_model(ws, corpus, mode, rng)
    history = next_mod.train_next(
        model, corpus, ctx_topk if mode == next_mod.WITH_CONTEXT else None,
        rng, lr=cfg.lr, batch_size=cfg.batch, max_epochs=cfg.max_epochs,
        patience=cfg.patience, clip_norm=cfg.clip_norm)
    return model, history


def run_train_next(ws: Workspace, ablation: bool = False) -> Path:
    mode = next_mod.ABLATION if ablation else next_mod.WITH_CONTEXT
    corpus = load_ingested(ws)
    _, ctx_topk, _ = load_context_predictor(ws)
    path, reuse = ws.begin(_next_stage_name(mode))
    if reuse:
        return path
    model, history = _train_next_once(ws, corpus, ctx_topk, mode, ws.cfg.seed)
    save_checkpoint(path / "nextitem.ckpt",
                    {p.name: p.value for p in model.params()},
                    config={"mode": mode, "num_users": corpus.num_users,
                            "num_items": corpus.num_items})
    ws.finish(_next_stage_name(mode), path, {
        "mode": mode,
        "epochs_run": len(history["train_loss"]),
        "best_epoch": history["best_epoch"],
        "best_val_mrr": max(history["val_mrr"]) if history["val_mrr"] else None,
    })
    return path


def load_next_model(ws: Workspace, ablation: bool = False) -> next_mod.NextItemModel:
    mode = next_mod.ABLATION if ablation else next_mod.WITH_CONTEXT
    path = ws.require(_next_stage_name(mode))
    ck = load_checkpoint(path / "nextitem.ckpt")
    corpus = load_ingested(ws)
    model = _build_next_model(ws, corpus, mode, np.random.default_rng(ws.cfg.seed))
    for p in model.params():
        p.value[...] = ck.tensors[p.name]
    return model


def _rep_metrics(ws: Workspace, corpus: SplitCorpus,
                 ctx_topk: np.ndarray | None, mode: str,
                 seeds: list[int],
                 rep0_model: next_mod.NextItemModel | None = None) -> EvalReport:
    examples = next_mod.build_rank_examples(corpus, TEST)
    if not examples:
        raise PipelineError("no test interactions to evaluate")
    mrrs: list[float] = []
    recalls: list[float] = []
    for r, seed in enumerate(seeds):
        if r == 0 and rep0_model is not None:
            model = rep0_model  # identical to retraining with seeds[0]
        else:
            model, _ = _train_next_once(ws, corpus, ctx_topk, mode, seed)
        ranks = next_mod.compute_ranks(model, corpus, examples, ctx_topk)
        mrrs.append(mrr(ranks))
        recalls.append(recall_at_k(ranks, 10))
    return EvalReport(mode=mode, seeds=seeds, mrr_values=mrrs,
                      recall_values=recalls, num_examples=len(examples),
                      config_hash=ws.config_hash)


def run_evaluate(ws: Workspace, ablation: bool = False) -> Path:
    mode = next_mod.ABLATION if ablation else next_mod.WITH_CONTEXT
    corpus = load_ingested(ws)
    _, ctx_topk, _ = load_context_predictor(ws)
    rep0 = load_next_model(ws, ablation)
    stage = "evaluate" if mode == next_mod.WITH_CONTEXT else "evaluate-ablation"
    path, reuse = ws.begin(stage)
    if reuse:
        return path
    seeds = [ws.cfg.seed + r for r in range(ws.cfg.repetitions)]
    report = _rep_metrics(ws, corpus, ctx_topk, mode, seeds, rep0_model=rep0)
    (path / "metrics.json").write_text(report.to_json())
    ws.finish(stage, path, {"mean_mrr": report.mean_mrr,
                            "mean_recall_at_10": report.mean_recall})
    return path


def run_ablate(ws: Workspace) -> Path:
    """Paired with/without-context repetitions plus one-tailed Welch tests."""
    corpus = load_ingested(ws)
    _, ctx_topk, _ = load_context_predictor(ws)
    path, reuse = ws.begin("ablate")
    if reuse:
        return path
    seeds = [ws.cfg.seed + r for r in range(ws.cfg.repetitions)]
    with_report = _rep_metrics(ws, corpus, ctx_topk, next_mod.WITH_CONTEXT, seeds)
    abl_report = _rep_metrics(ws, corpus, None, next_mod.ABLATION, seeds)
    t_mrr, p_mrr = t_test_one_tailed(with_report.mrr_values, abl_report.mrr_values)
    t_rec, p_rec = t_test_one_tailed(with_report.recall_values,
                                     abl_report.recall_values)
    payload = {
        "config_hash": ws.config_hash,
        "seeds": seeds,
        "with_context": with_report.to_dict(),
        "ablation": abl_report.to_dict(),
        "t_test": {"mrr": {"t": t_mrr, "p": p_mrr},
                   "recall_at_10": {"t": t_rec, "p": p_rec}},
        "mrr_ratio": with_report.mean_mrr / abl_report.mean_mrr,
        "recall_ratio": with_report.mean_recall / abl_report.mean_recall,
    }
    (path / "ablation.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    ws.finish("ablate", path, {"p_mrr": p_mrr, "mrr_ratio": payload["mrr_ratio"]})
    return path


# ---------------------------------------------------------------------------
# sweep

SWEEP_GRIDS = {
    "num_contexts": [10, 20, 40, 60, 80],
    "top_k_contexts": [1, 2, 3, 4, 5],
    "user_item_dim": [64, 128, 256, 512],
    "context_dim": [8, 16, 32, 64],
}


def run_sweep(ws: Workspace, param: str, values: list | None,
              input_path: str | Path, delimiter: str = ",",
              has_header: bool = False) -> Path:
    """Grid one hyperparameter, all others fixed; full pipeline per value."""
    if values is None:
        if param not in SWEEP_GRIDS:
            raise PipelineError(f"no default grid for {param!r}; pass --values")
        values = SWEEP_GRIDS[param]
    path, reuse = ws.begin(f"sweep-{param}")
    if reuse:
        return path
    rows = []
    for value in values:
        overrides = ({"user_dim": value, "item_dim": value}
                     if param == "user_item_dim" else {param: value})
        sub = Workspace(ws.cfg.replace(**overrides), ws.workdir)
        run_ingest(sub, input_path, delimiter, has_header)
        run_embed(sub)
        run_contextualize(sub)
        run_train_context(sub)
        run_train_next(sub)
        metrics_path = run_evaluate(sub) / "metrics.json"
        metrics = json.loads(metrics_path.read_text())
        rows.append({"value": value, "config_hash": sub.config_hash,
                     "mean_mrr": metrics["mean"]["mrr"],
                     "mean_recall_at_10": metrics["mean"]["recall_at_10"]})
    payload = {"param": param, "values": list(values), "rows": rows,
               "base_config_hash": ws.config_hash}
    (path / "sweep.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    ws.finish(f"sweep-{param}", path, {"num_values": len(values)})
    return path


# ---------------------------------------------------------------------------
# export

def run_export(ws: Workspace, what: str, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if what == "embeddings":
        shutil.copyfile(ws.require("embed") / "embeddings.csv", out_path)
    elif what == "clusters":
        shutil.copyfile(ws.require("contextualize") / "clusters.csv", out_path)
    elif what == "context-predictions":
        shutil.copyfile(ws.require("train-context") / "predictions.csv", out_path)
    elif what == "ranked-lists":
        corpus = load_ingested(ws)
        _, ctx_topk, _ = load_context_predictor(ws)
        model = load_next_model(ws)
        next_mod.export_ranked_lists(out_path, model, corpus, ctx_topk)
    else:
        raise PipelineError(f"unknown export {what!r}")
    return out_path


def run_full_pipeline(ws: Workspace, input_path: str | Path,
                      delimiter: str = ",", has_header: bool = False) -> Path:
    run_ingest(ws, input_path, delimiter, has_header)
    run_embed(ws)
    run_contextualize(ws)
    run_train_context(ws)
    run_train_next(ws)
    return run_evaluate(ws)
