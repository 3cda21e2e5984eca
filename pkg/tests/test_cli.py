import csv
import io
import json

import pytest

from kvrunahead.cli import NOISE_COLUMNS, PREDICT_COLUMNS, SWEEP_COLUMNS, main

SMALL = {
    "verify": {"context_lengths": [9, 16], "process_counts": [1, 2, 3], "oracle_max_context": 16},
    "sweep": {"context_lengths": [64, 512], "process_counts": [1, 2, 4], "verify_max_context": 64},
    "table": {"context_lengths": [2048, 4096, 6144], "process_count": 3},
    "noise": {"context_lengths": [1024], "process_count": 4, "trials": 5},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestVerify:
    def test_passes_and_prints_worked_example(self, config, capsys):
        assert main(["verify", "--config", config]) == 0
        out = capsys.readouterr().out
        assert "dot products per layer [16, 21, 18]" in out
        assert "rows received per worker [12, 12, 12]" in out
        assert "FAIL" not in out

    @pytest.mark.parametrize("fault", ["drop_handoff", "duplicate_handoff", "misroute_handoff"])
    def test_fault_fails(self, config, capsys, fault):
        assert main(["verify", "--config", config, "--fault", fault]) == 1
        assert "protocol error" in capsys.readouterr().out

    def test_json_summary(self, config, capsys):
        assert main(["verify", "--config", config, "--format", "json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["failed"] == 0 and doc["passed"] == len(doc["checks"])


class TestConfigErrors:
    def test_bad_json_points_at_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "seed": 1,\n  "model": {"d_model": 16,,}\n}\n')
        assert main(["verify", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert ":3:" in err and "^" in err

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"d_modle": 16}}))
        assert main(["sweep", "--config", str(path)]) == 2
        assert "d_modle" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["sweep", "--config", "/nonexistent/cfg.json"]) == 2

    def test_invalid_model(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"d_model": 10, "n_heads": 4}}))
        assert main(["verify", "--config", str(path)]) in (1, 2)
        assert "error" in capsys.readouterr().err

    def test_bad_flag(self, capsys):
        assert main(["sweep", "--bogus"]) == 2


class TestSweep:
    def test_columns_and_speedups(self, config, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", "--config", config, "--out", str(out)]) == 0
        text = out.read_text()
        assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS)
        rows = read_csv(text)
        for row in rows:
            if row["p"] == "1":
                assert float(row["speedup"]) == pytest.approx(1.0)
            if row["max_dev"]:
                assert float(row["max_dev"]) <= 1e-10
        by = {(r["strategy"], r["C"], r["p"]): float(r["ttft_sim"]) for r in rows}
        for C in ("64", "512"):
            for p in ("2", "4"):
                assert by["kvr-s", C, p] <= by["kvr-e", C, p]
                assert by["kvr-s", C, p] >= float(
                    next(r for r in rows if (r["strategy"], r["C"], r["p"]) == ("kvr-s", C, p))["ttft_lower"]
                )

    def test_rerun_is_byte_identical(self, config, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["sweep", "--config", config, "--out", str(a)])
        main(["sweep", "--config", config, "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


class TestSearchPredict:
    def test_search_is_deterministic_and_front_loaded(self, config, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["search", "--config", config, "--table", str(a)]) == 0
        assert main(["search", "--config", config, "--table", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        doc = json.loads(a.read_text())
        assert doc["p"] == 3 and len(doc["entries"]) == 3
        # attention dominates from a few thousand tokens: earlier ranks take more
        for entry in doc["entries"]:
            assert entry["ratios"][0] >= entry["ratios"][-1]
            assert sum(entry["ratios"]) == pytest.approx(1.0)

    def test_predict_gap_and_clamp(self, config, tmp_path, capsys):
        table = tmp_path / "t.json"
        main(["search", "--config", config, "--table", str(table)])
        capsys.readouterr()
        assert main(["predict", "--config", config, "--table", str(table), "--context", "5000"]) == 0
        captured = capsys.readouterr()
        (row,) = read_csv(captured.out)
        assert list(row) == PREDICT_COLUMNS
        assert abs(float(row["gap"])) <= 0.05 and row["clamped"] == "False"
        assert main(["predict", "--config", config, "--table", str(table), "--context", "1000"]) == 0
        captured = capsys.readouterr()
        assert "warning" in captured.err
        assert read_csv(captured.out)[0]["clamped"] == "True"

    def test_predict_requires_table(self, config, capsys):
        assert main(["predict", "--config", config]) == 2


class TestNoise:
    def test_kvr_more_robust(self, config, capsys):
        assert main(["noise", "--config", config]) == 0
        captured = capsys.readouterr()
        rows = read_csv(captured.out)
        assert list(rows[0]) == NOISE_COLUMNS
        agg = {r["strategy"]: float(r["mean_degradation"]) for r in rows if r["C"] == "all"}
        assert agg["kvr-e"] < agg["tsp"] and agg["kvr-s"] < agg["tsp"]
        assert "KVR more robust" in captured.err

    def test_factor_one_is_zero(self, tmp_path, capsys):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"noise": {"context_lengths": [512], "slowdown_factor": 1.0, "trials": 3}}))
        assert main(["noise", "--config", str(path)]) == 0
        rows = read_csv(capsys.readouterr().out)
        assert all(float(r["max_degradation"]) == 0.0 for r in rows)
