import json

import pytest

from ctxrec import pipeline
from ctxrec.cli import main
from ctxrec.config import (
    ConfigError,
    PipelineConfig,
    parse_config_file,
    resolve_config,
)
from ctxrec.corpus import build_corpus, parse_log
from ctxrec.synth import SynthSpec, generate, planted_labels

TINY = dict(num_users=10, num_contexts=3, items_per_context=8,
            sessions_per_user=12, seed=5, mean_session_len=2.2)

TINY_CFG = dict(num_contexts=3, top_k_contexts=2, user_dim=8, item_dim=8,
                context_dim=4, session_emb_dim=8, lstm_hidden=4,
                graph_base_dim=8, graph_epochs=4, graph_batch=64,
                batch=128, max_epochs=3, patience=2, repetitions=2, seed=1)


def _tiny_cfg_flags():
    flags = []
    for key, value in TINY_CFG.items():
        flags += ["--" + key.replace("_", "-"), str(value)]
    return flags


class TestSynth:
    def test_item_ids_bounded(self, tmp_path):
        spec = SynthSpec(num_users=6, num_contexts=8, items_per_context=30,
                         sessions_per_user=8, seed=0)
        generate(spec, tmp_path / "log.csv")
        items = [int(line.split(",")[1])
                 for line in (tmp_path / "log.csv").read_text().splitlines()]
        assert max(items) < 240
        assert min(items) >= 0

    def test_byte_identical_given_seed(self, tmp_path):
        spec = SynthSpec(**TINY)
        generate(spec, tmp_path / "a.csv", tmp_path / "a.json")
        generate(spec, tmp_path / "b.csv", tmp_path / "b.json")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_sidecar_covers_every_session(self, tmp_path):
        spec = SynthSpec(**TINY)
        sidecar = generate(spec, tmp_path / "log.csv", tmp_path / "labels.json")
        assert len(sidecar["sessions"]) == spec.num_users * spec.sessions_per_user
        corpus = build_corpus(parse_log(tmp_path / "log.csv"))
        labels = planted_labels(sidecar, corpus)
        assert corpus.num_sessions == len(sidecar["sessions"])
        assert (labels >= 0).all()

    def test_sessionizer_recovers_generated_boundaries(self, tmp_path):
        spec = SynthSpec(**TINY)
        sidecar = generate(spec, tmp_path / "log.csv")
        corpus = build_corpus(parse_log(tmp_path / "log.csv"))
        lengths = [s["length"] for s in sidecar["sessions"]]
        assert sorted(s.length for s in corpus.sessions) == sorted(lengths)


class TestConfig:
    def test_defaults_match_stated_values(self):
        cfg = PipelineConfig()
        assert (cfg.idle_threshold_s, cfg.min_user_interactions) == (3600, 10)
        assert (cfg.num_contexts, cfg.top_k_contexts) == (40, 3)
        assert (cfg.user_dim, cfg.item_dim, cfg.context_dim) == (256, 256, 32)
        assert (cfg.lr, cfg.batch, cfg.max_epochs) == (0.001, 1024, 200)
        assert (cfg.max_seq_len, cfg.repetitions) == (50, 5)

    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("num_contexts=12  # comment\nlr=0.01\n\n")
        cfg = resolve_config(path, {"batch": 64}, env={})
        assert cfg.num_contexts == 12
        assert cfg.lr == 0.01
        assert cfg.batch == 64

    def test_env_seed_wins(self, tmp_path):
        cfg = resolve_config(None, {"seed": 3}, env={"CTXREC_SEED": "99"})
        assert cfg.seed == 99

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("nope=1\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(path)

    def test_invariants_enforced(self):
        with pytest.raises(ConfigError, match="top_k_contexts"):
            PipelineConfig(num_contexts=2, top_k_contexts=3).validate()
        with pytest.raises(ConfigError, match="positive"):
            PipelineConfig(batch=0).validate()

    def test_hash_stable_and_sensitive(self):
        a = PipelineConfig().config_hash()
        b = PipelineConfig().config_hash()
        c = PipelineConfig(seed=1).config_hash()
        assert a == b
        assert a != c


@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny_pipeline")
    generate(SynthSpec(**TINY), tmp / "log.csv", tmp / "labels.json")
    cfg = PipelineConfig(**TINY_CFG)
    ws = pipeline.Workspace(cfg, tmp / "work")
    pipeline.run_full_pipeline(ws, tmp / "log.csv")
    return tmp, cfg, ws


class TestPipelineMechanics:
    def test_all_stage_artifacts_exist(self, tiny_pipeline):
        _, _, ws = tiny_pipeline
        for stage, filename in [("ingest", "corpus.jsonl"),
                                ("embed", "embeddings.npz"),
                                ("contextualize", "contexts.npz"),
                                ("train-context", "predictions.npz"),
                                ("train-next", "nextitem.ckpt"),
                                ("evaluate", "metrics.json")]:
            assert (ws.stage_dir(stage) / filename).exists()
            assert (ws.stage_dir(stage) / "meta.json").exists()

    def test_metrics_json_shape(self, tiny_pipeline):
        _, cfg, ws = tiny_pipeline
        metrics = json.loads((ws.stage_dir("evaluate") / "metrics.json").read_text())
        assert metrics["config_hash"] == cfg.config_hash()
        assert len(metrics["repetitions"]) == cfg.repetitions
        assert metrics["seeds"] == [cfg.seed + r for r in range(cfg.repetitions)]
        assert 0.0 <= metrics["mean"]["mrr"] <= 1.0
        assert 0.0 <= metrics["mean"]["recall_at_10"] <= 1.0

    def test_rerun_reuses_artifacts(self, tiny_pipeline):
        tmp, _, ws = tiny_pipeline
        marker = ws.stage_dir("embed") / "embeddings.npz"
        mtime = marker.stat().st_mtime_ns
        pipeline.run_embed(ws)  # must reuse, not rewrite
        assert marker.stat().st_mtime_ns == mtime

    def test_different_input_same_config_refused(self, tiny_pipeline, tmp_path):
        tmp, cfg, ws = tiny_pipeline
        other = tmp_path / "other.csv"
        generate(SynthSpec(**{**TINY, "seed": 6}), other)
        with pytest.raises(pipeline.PipelineError, match="different input"):
            pipeline.run_ingest(ws, other)

    def test_tampered_hash_chain_refused(self, tiny_pipeline, tmp_path):
        tmp, cfg, _ = tiny_pipeline
        import shutil
        workdir = tmp_path / "tampered"
        shutil.copytree(tmp / "work", workdir)
        ws = pipeline.Workspace(cfg, workdir)
        meta_path = ws.stage_dir("train-next") / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["config_hash"] = "0" * 64
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(pipeline.PipelineError, match="mismatched"):
            pipeline.run_evaluate(ws)

    def test_missing_artifact_names_required_stage(self, tiny_pipeline, tmp_path):
        _, cfg, _ = tiny_pipeline
        ws = pipeline.Workspace(cfg, tmp_path / "fresh")
        with pytest.raises(pipeline.MissingArtifactError, match="ingest"):
            pipeline.run_embed(ws)

    def test_evaluate_before_train_next_names_it(self, tiny_pipeline, tmp_path):
        tmp, cfg, ws_full = tiny_pipeline
        import shutil
        workdir = tmp_path / "partial"
        workdir.mkdir()
        for stage in ["ingest", "embed", "contextualize", "train-context"]:
            src = ws_full.stage_dir(stage)
            shutil.copytree(src, workdir / src.name)
        ws = pipeline.Workspace(cfg, workdir)
        with pytest.raises(pipeline.MissingArtifactError, match="train-next"):
            pipeline.run_evaluate(ws)

    def test_threads_flag_warns(self, tmp_path):
        with pytest.warns(UserWarning, match="threads"):
            pipeline.Workspace(PipelineConfig(threads=2), tmp_path)

    def test_ablate_artifact(self, tiny_pipeline):
        _, cfg, ws = tiny_pipeline
        path = pipeline.run_ablate(ws)
        payload = json.loads((path / "ablation.json").read_text())
        assert set(payload) >= {"with_context", "ablation", "t_test",
                                "mrr_ratio", "seeds"}
        assert len(payload["with_context"]["repetitions"]) == cfg.repetitions
        assert 0.0 <= payload["t_test"]["mrr"]["p"] <= 1.0

    def test_ablation_train_and_evaluate_stages(self, tiny_pipeline):
        _, _, ws = tiny_pipeline
        pipeline.run_train_next(ws, ablation=True)
        path = pipeline.run_evaluate(ws, ablation=True)
        metrics = json.loads((path / "metrics.json").read_text())
        assert metrics["mode"] == "ablation"
        assert path.name.startswith("evaluate-ablation")


class TestCli:
    def test_synth_and_full_chain_exit_codes(self, tmp_path, capsys):
        log = tmp_path / "log.csv"
        args = ["synth", "--out", str(log), "--sidecar", str(tmp_path / "s.json")]
        for key, value in TINY.items():
            args += ["--" + key.replace("_", "-"), str(value)]
        assert main(args) == 0

        wd = str(tmp_path / "work")
        flags = _tiny_cfg_flags()
        assert main(["ingest", "--workdir", wd, "--input", str(log)] + flags) == 0
        assert main(["embed", "--workdir", wd] + flags) == 0
        assert main(["contextualize", "--workdir", wd] + flags) == 0
        assert main(["train-context", "--workdir", wd] + flags) == 0
        assert main(["train-next", "--workdir", wd] + flags) == 0
        assert main(["evaluate", "--workdir", wd] + flags) == 0
        out = tmp_path / "emb.csv"
        assert main(["export", "--workdir", wd, "--what", "embeddings",
                     "--out", str(out)] + flags) == 0
        assert out.exists()

    def test_evaluate_without_train_next_fails_with_name(self, tmp_path, capsys):
        log = tmp_path / "log.csv"
        generate(SynthSpec(**TINY), log)
        wd = str(tmp_path / "work")
        flags = _tiny_cfg_flags()
        for stage in ["ingest", "embed", "contextualize", "train-context"]:
            extra = ["--input", str(log)] if stage == "ingest" else []
            assert main([stage, "--workdir", wd] + extra + flags) == 0
        assert main(["evaluate", "--workdir", wd] + flags) == 1
        assert "train-next" in capsys.readouterr().err

    def test_bad_config_fails_before_work(self, tmp_path, capsys):
        wd = tmp_path / "work"
        rc = main(["ingest", "--workdir", str(wd), "--input", "missing.csv",
                   "--num-contexts", "2", "--top-k-contexts", "5"])
        assert rc == 1
        assert "top_k_contexts" in capsys.readouterr().err
        assert not any(wd.iterdir()) if wd.exists() else True

    def test_sweep_grid_produces_one_row_per_value(self, tmp_path):
        log = tmp_path / "log.csv"
        generate(SynthSpec(**TINY), log)
        wd = str(tmp_path / "work")
        sweep_cfg = []
        for key, value in {**TINY_CFG, "top_k_contexts": 1}.items():
            sweep_cfg += ["--" + key.replace("_", "-"), str(value)]
        rc = main(["sweep", "--workdir", wd, "--input", str(log),
                   "--param", "num_contexts", "--values", "2,3,4,5,6",
                   ] + sweep_cfg)
        assert rc == 0
        sweep_dirs = list((tmp_path / "work").glob("sweep-num_contexts-*"))
        assert len(sweep_dirs) == 1
        payload = json.loads((sweep_dirs[0] / "sweep.json").read_text())
        assert [row["value"] for row in payload["rows"]] == [2, 3, 4, 5, 6]
        assert len(payload["rows"]) == 5
