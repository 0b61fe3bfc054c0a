import numpy as np
import pytest

from ctxrec import cluster as cluster_mod
from ctxrec import graph as graph_mod
from ctxrec import predictor as pred_mod
from ctxrec.corpus import Interaction, build_corpus, parse_log, split
from ctxrec.synth import SynthSpec, generate


def corpus_from_rows(rows, **split_kwargs):
    """Build a SplitCorpus straight from (user, item, timestamp) tuples."""
    inter = sorted((Interaction(u, i, t) for u, i, t in rows),
                   key=lambda x: (x.user_id, x.timestamp))
    return split(inter, **split_kwargs)


def synth_corpus(tmp_path, **overrides):
    spec = SynthSpec(**overrides)
    log = tmp_path / "log.csv"
    sidecar = generate(spec, log, tmp_path / "labels.json")
    parsed = parse_log(log)
    corpus = build_corpus(parsed)
    return corpus, sidecar, log, spec


@pytest.fixture(scope="module")
def small_stack(tmp_path_factory):
    """A small end-to-end trained stack shared by model-level tests:
    planted corpus, graph, encoder, embeddings, clustering, features."""
    tmp = tmp_path_factory.mktemp("small_stack")
    corpus, sidecar, _, spec = synth_corpus(
        tmp, num_users=16, num_contexts=4, items_per_context=12,
        sessions_per_user=14, seed=11, mean_session_len=2.5)
    graph = graph_mod.build_graph_from_corpus(corpus)
    encoder, history = graph_mod.train_encoder(
        graph, base_dim=16, out_dim=16, epochs=20, batch_size=256,
        lr=0.01, seed=11)
    embeddings = np.zeros((corpus.num_sessions, 16))
    in_graph = encoder.embed_all_sessions(graph)
    for node, sid in enumerate(graph.session_ids):
        embeddings[sid] = in_graph[node]
    for s in corpus.sessions:
        sid = s.session_id
        if sid not in graph.node_of_session:
            try:
                embeddings[sid] = encoder.embed_new_session(graph, list(s.items))
            except ValueError:
                pass
    model = cluster_mod.kmeans_fit(embeddings[graph.session_ids], 4, seed=11,
                                   session_ids=graph.session_ids)
    labels = cluster_mod.label_all(model, encoder, graph, corpus, strict=False)
    features = pred_mod.build_session_features(corpus, embeddings)
    return {
        "corpus": corpus,
        "sidecar": sidecar,
        "spec": spec,
        "graph": graph,
        "encoder": encoder,
        "encoder_history": history,
        "embeddings": embeddings,
        "kmeans": model,
        "labels": labels,
        "features": features,
    }
