import json

import pytest

from qpp.cli import main
from tests.conftest import make_cluster_corpus, write_config, write_corpus_files


@pytest.fixture(scope="module")
def corpus():
    return make_cluster_corpus(n_clusters=3, docs_per=40, queries_per=6, dim=16, seed=7)


@pytest.fixture
def setup(corpus, tmp_path):
    collection, queries, labels, _, _ = corpus
    paths = write_corpus_files(tmp_path, collection, queries, labels)
    config = write_config(tmp_path, paths)
    return tmp_path, paths, config


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestSubcommands:
    def test_validate(self, setup, capsys):
        tmp_path, _, config = setup
        assert run_cli("validate", "--config", config) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["collection"]["count"] == 120

    def test_retrieve(self, setup):
        tmp_path, _, config = setup
        assert run_cli("retrieve", "--config", config) == 0
        ranked = tmp_path / "out" / "ranked" / "cosine.tsv"
        assert ranked.exists()
        lines = [l for l in ranked.read_text().splitlines() if not l.startswith("#")]
        assert len(lines) == 18 * 10  # 18 queries, k=10

    def test_ground_truth_with_measure_filter(self, setup):
        tmp_path, _, config = setup
        assert run_cli("ground-truth", "--config", config, "--measure", "ap") == 0
        gt = tmp_path / "out" / "ground_truth"
        assert (gt / "cosine.ap.tsv").exists()
        assert not (gt / "cosine.p_at_10.tsv").exists()

    def test_ground_truth_unknown_measure(self, setup, capsys):
        _, _, config = setup
        code = run_cli("ground-truth", "--config", config, "--measure", "mrr")
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "CONFIG_ERROR"

    def test_ground_truth_k_override(self, setup):
        tmp_path, _, config = setup
        assert run_cli("ground-truth", "--config", config, "--k", "5") == 0
        assert (tmp_path / "out" / "ground_truth" / "cosine.p_at_5.tsv").exists()

    def test_predict(self, setup):
        tmp_path, _, config = setup
        assert run_cli("predict", "--config", config) == 0
        scores = tmp_path / "out" / "scores" / "cosine"
        names = {p.name for p in scores.iterdir()}
        assert "score_variance.tsv" in names
        assert "feature_removal.tsv" in names

    def test_train_meta(self, setup):
        tmp_path, _, config = setup
        assert run_cli("train-meta", "--config", config) == 0
        assert (tmp_path / "out" / "folds.tsv").exists()
        svr = tmp_path / "out" / "models" / "svr" / "cosine"
        assert len(list(svr.glob("ap.fold*.bin"))) == 5

    def test_run_and_report(self, setup):
        tmp_path, _, config = setup
        assert run_cli("run", "--config", config) == 0
        report = json.loads(
            (tmp_path / "out" / "report" / "report.json").read_text()
        )
        assert report["meta"]["queries"] == 18
        assert any(r["predictor"] == "meta_svr[ap]" for r in report["rows"])

    def test_evaluate_alias(self, setup):
        tmp_path, _, config = setup
        assert run_cli("evaluate", "--config", config) == 0
        assert (tmp_path / "out" / "report" / "report.json").exists()

    def test_emit_matrices(self, setup):
        tmp_path, _, config = setup
        assert run_cli("emit-matrices", "--config", config) == 0
        assert (tmp_path / "out" / "matrices" / "cosine.bin").exists()

    def test_sweep_values(self, setup):
        tmp_path, paths, _ = setup
        config = write_config(
            tmp_path, paths, name="sweep.json", meta={"enabled": False}
        )
        assert run_cli("sweep", "--config", config, "--param", "K", "--values", "2,3") == 0
        assert (tmp_path / "out" / "sweep" / "K" / "summary.tsv").exists()

    def test_sweep_range(self, setup):
        tmp_path, paths, _ = setup
        config = write_config(
            tmp_path, paths, name="sweep2.json", meta={"enabled": False}
        )
        code = run_cli("sweep", "--config", config, "--param", "m", "--range", "4:6:2")
        assert code == 0
        # stop is inclusive: values 4 and 6
        assert (tmp_path / "out" / "sweep" / "m" / "4").is_dir()
        assert (tmp_path / "out" / "sweep" / "m" / "6").is_dir()

    def test_sweep_bad_range(self, setup, capsys):
        _, _, config = setup
        assert run_cli("sweep", "--config", config, "--param", "K", "--range", "abc") == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "INVALID_RANGE"

    def test_out_dir_override(self, setup):
        tmp_path, _, config = setup
        other = tmp_path / "custom"
        assert run_cli("retrieve", "--config", config, "--out-dir", other) == 0
        assert (other / "ranked" / "cosine.tsv").exists()


class TestErrorPaths:
    def test_missing_config_file(self, tmp_path, capsys):
        assert run_cli("run", "--config", tmp_path / "ghost.json") == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "IO_ERROR"

    def test_missing_qrels_exits_two_naming_ingest(self, setup, capsys):
        tmp_path, paths, _ = setup
        bad = dict(paths)
        bad["qrels"] = str(tmp_path / "ghost.tsv")
        config = write_config(tmp_path, bad, name="bad.json")
        assert run_cli("run", "--config", config) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["stage"] == "ingest"

    def test_malformed_config_json(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert run_cli("run", "--config", path) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "FORMAT_ERROR"

    def test_unknown_config_key(self, setup, capsys):
        tmp_path, paths, _ = setup
        config = write_config(tmp_path, paths, name="u.json", bogus=1)
        assert run_cli("run", "--config", config) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "CONFIG_ERROR"

    def test_corrupt_embeddings_rejected(self, setup, capsys):
        tmp_path, paths, _ = setup
        corrupted = tmp_path / "corrupt.bin"
        raw = bytearray((tmp_path / "docs.bin").read_bytes())
        corrupted.write_bytes(bytes(raw[: len(raw) // 2]))
        bad = dict(paths)
        bad["collection"] = str(corrupted)
        config = write_config(tmp_path, bad, name="c.json")
        assert run_cli("run", "--config", config) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["stage"] == "ingest"
        assert err["error"] == "FORMAT_ERROR"


class TestIdempotence:
    def test_second_run_overwrites_cleanly(self, setup):
        tmp_path, _, config = setup
        assert run_cli("run", "--config", config) == 0
        first = (tmp_path / "out" / "report" / "report.json").read_bytes()
        assert run_cli("run", "--config", config) == 0
        second = (tmp_path / "out" / "report" / "report.json").read_bytes()
        assert first == second


class TestEnvOverrides:
    def test_env_reaches_pipeline(self, setup, monkeypatch):
        tmp_path, _, config = setup
        monkeypatch.setenv("IQPP_OUT_DIR", str(tmp_path / "envout"))
        monkeypatch.setenv("IQPP_META_ENABLED", "false")
        assert run_cli("run", "--config", config) == 0
        assert (tmp_path / "envout" / "report" / "report.json").exists()
        assert not (tmp_path / "envout" / "folds.tsv").exists()
