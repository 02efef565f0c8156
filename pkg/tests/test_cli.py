"""Command-line interface: exit codes, config merging, JSON output, round trips."""

import json
import subprocess

import numpy as np
import pytest

from mildnet.cli import main
from mildnet.dataset import load_manifest
from mildnet.images import write_image

ABLATION_TOTALS = {
    "none": 19961664,
    "b4": 21010240,
    "b3,b4": 21534528,
    "b2,b3,b4": 21796672,
    "b2,b3,b4,b5": 21927744,
}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("MILDNET_SEED", raising=False)


def run_cli(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


class TestParamsAndAblate:
    def test_params_default_prints_full_tap_total(self, capsys):
        rc, out, _ = run_cli(capsys, "params")
        assert rc == 0
        assert out.strip() == "21927744"

    @pytest.mark.parametrize("taps,total", sorted(ABLATION_TOTALS.items()))
    def test_params_per_tap_set(self, capsys, taps, total):
        rc, out, _ = run_cli(capsys, "params", "--taps", taps)
        assert rc == 0
        assert out.strip() == str(total)

    def test_params_json(self, capsys):
        rc, out, _ = run_cli(capsys, "params", "--json")
        assert rc == 0
        doc = json.loads(out)
        assert doc["params"] == 21927744
        assert doc["params_millions"] == 21.93
        assert doc["concat_width"] == 1472

    def test_ablate_table_and_json_agree(self, capsys):
        rc, out, _ = run_cli(capsys, "ablate")
        assert rc == 0
        lines = out.strip().splitlines()
        assert len(lines) == 6  # header plus five rows
        rc, out, _ = run_cli(capsys, "ablate", "--json")
        doc = json.loads(out)
        assert [r["params"] for r in doc["rows"]] == sorted(ABLATION_TOTALS.values())
        assert [r["params_millions"] for r in doc["rows"]] == [
            19.96, 21.01, 21.53, 21.8, 21.93,
        ]


class TestExitCodes:
    def test_no_arguments_is_usage_error(self, capsys):
        rc, _, err = run_cli(capsys)
        assert rc == 1
        assert "usage" in err.lower()

    def test_unknown_subcommand_is_usage_error(self, capsys):
        rc, _, err = run_cli(capsys, "frobnicate")
        assert rc == 1

    def test_help_exits_zero(self, capsys):
        rc, out, _ = run_cli(capsys, "--help")
        assert rc == 0

    def test_subcommand_help_lists_flags_with_defaults(self, capsys):
        rc, out, _ = run_cli(capsys, "train", "--help")
        assert rc == 0
        for flag in ("--epochs", "--batch-size", "--loss", "--margin", "--lr", "--seed"):
            assert flag in out
        assert "default" in out

    def test_missing_input_file_is_runtime_error(self, capsys, tmp_path):
        rc, _, err = run_cli(capsys, "train", str(tmp_path / "nope.jsonl"))
        assert rc == 2
        assert "error" in err

    def test_unknown_preset_is_usage_error(self, capsys, tmp_path):
        manifest = tmp_path / "m.jsonl"
        manifest.write_text("")
        rc, _, err = run_cli(capsys, "train", str(manifest), "--preset", "huge")
        assert rc == 1
        assert "preset" in err

    def test_synth_requires_output_directory(self, capsys):
        rc, _, err = run_cli(capsys, "synth")
        assert rc == 1

    def test_index_query_requires_query_id(self, capsys):
        rc, _, err = run_cli(capsys, "index-query")
        assert rc == 1
        assert "query-id" in err


class TestConfigFile:
    def test_file_value_used_when_flag_absent(self, capsys, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("taps = none\n")
        rc, out, _ = run_cli(capsys, "params", "--config", str(cfg))
        assert rc == 0
        assert out.strip() == "19961664"

    def test_flag_overrides_file_value(self, capsys, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("taps = none\n")
        rc, out, _ = run_cli(capsys, "params", "--config", str(cfg), "--taps", "b4")
        assert rc == 0
        assert out.strip() == "21010240"

    def test_comments_and_blank_lines_ignored(self, capsys, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\n\ntaps = b4  # trailing\n")
        rc, out, _ = run_cli(capsys, "params", "--config", str(cfg))
        assert rc == 0
        assert out.strip() == "21010240"

    def test_unknown_key_names_key_and_line(self, capsys, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("taps = b4\nbogus = 1\n")
        rc, _, err = run_cli(capsys, "params", "--config", str(cfg))
        assert rc == 1
        assert ":2:" in err and "bogus" in err

    def test_malformed_line_cites_line_number(self, capsys, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("taps = b4\n\nthis is not an assignment\n")
        rc, _, err = run_cli(capsys, "params", "--config", str(cfg))
        assert rc == 1
        assert ":3:" in err

    def test_bad_value_names_key_and_line(self, capsys, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("n = plenty\n")
        rc, _, err = run_cli(capsys, "synth", str(tmp_path / "out"), "--config", str(cfg))
        assert rc == 1
        assert ":1:" in err and "'n'" in err

    def test_missing_config_file_is_usage_error(self, capsys, tmp_path):
        rc, _, err = run_cli(capsys, "params", "--config", str(tmp_path / "absent.cfg"))
        assert rc == 1


def normalized_manifest(out_dir):
    text = (out_dir / "manifest.jsonl").read_text()
    return text.replace(str(out_dir), "@")


class TestSeedSources:
    def synth(self, capsys, out_dir, *extra):
        rc, _, _ = run_cli(
            capsys, "synth", str(out_dir), "--n", "6", "--image-size", "16", *extra
        )
        assert rc == 0

    def test_env_seed_matches_explicit_flag(self, capsys, tmp_path, monkeypatch):
        a, b = tmp_path / "a", tmp_path / "b"
        monkeypatch.setenv("MILDNET_SEED", "7")
        self.synth(capsys, a)
        monkeypatch.delenv("MILDNET_SEED")
        self.synth(capsys, b, "--seed", "7")
        assert normalized_manifest(a) == normalized_manifest(b)

    def test_flag_beats_env_seed(self, capsys, tmp_path, monkeypatch):
        a, b = tmp_path / "a", tmp_path / "b"
        monkeypatch.setenv("MILDNET_SEED", "7")
        self.synth(capsys, a, "--seed", "0")
        monkeypatch.delenv("MILDNET_SEED")
        self.synth(capsys, b, "--seed", "0")
        assert normalized_manifest(a) == normalized_manifest(b)

    def test_non_integer_env_seed_is_usage_error(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("MILDNET_SEED", "lucky")
        rc, _, err = run_cli(capsys, "synth", str(tmp_path / "out"))
        assert rc == 1
        assert "MILDNET_SEED" in err


class TestGradcheck:
    def test_passes_at_default_tolerance(self, capsys):
        rc, out, _ = run_cli(capsys, "gradcheck", "--json")
        assert rc == 0
        doc = json.loads(out)
        assert doc["ok"] is True
        assert doc["max_rel_error"] <= 1e-4
        assert "network" in doc["detail"]

    def test_fails_when_tolerance_is_unreachable(self, capsys):
        rc, out, _ = run_cli(capsys, "gradcheck", "--tol", "1e-18")
        assert rc == 2
        assert "max relative error" in out


class TestRoundTrip:
    def test_synth_train_eval_embed_index(self, capsys, tmp_path):
        data = tmp_path / "data"
        rc, out, _ = run_cli(
            capsys, "synth", str(data), "--n", "12", "--image-size", "32",
            "--seed", "0", "--json",
        )
        assert rc == 0
        manifest = json.loads(out)["manifest"]
        assert json.loads(out)["triplets"] == 12

        weights = tmp_path / "w.mldw"
        rc, out, _ = run_cli(
            capsys, "train", manifest, "--epochs", "1", "--batch-size", "6",
            "--out", str(weights), "--seed", "0", "--json",
        )
        assert rc == 0
        doc = json.loads(out)
        assert doc["epochs_run"] == 1
        assert np.isfinite(doc["history"][0]["loss"])
        assert weights.exists()

        rc, out, _ = run_cli(
            capsys, "eval", manifest, "--weights", str(weights), "--json"
        )
        assert rc == 0
        metrics = json.loads(out)
        assert 0.0 <= metrics["triplet_accuracy"] <= 1.0

        records = load_manifest(manifest)
        images = [str(records[0].q_path), str(records[0].p_path)]
        store = tmp_path / "emb.mlde"
        rc, out, _ = run_cli(
            capsys, "embed", *images, "--weights", str(weights),
            "--store", str(store), "--json",
        )
        assert rc == 0
        doc = json.loads(out)
        from mildnet.model import tiny_config

        assert doc["count"] == 2 and doc["dim"] == tiny_config().embedding_dim

        index = tmp_path / "idx.mldi"
        rc, _, _ = run_cli(
            capsys, "index-build", "--store", str(store), "--out", str(index),
            "--trees", "4", "--seed", "0",
        )
        assert rc == 0

        rc, out, _ = run_cli(
            capsys, "index-query", "--index", str(index), "--store", str(store),
            "--query-id", images[0], "--top-k", "2", "--json",
        )
        assert rc == 0
        doc = json.loads(out)
        assert doc["neighbors"][0]["id"] == images[0]
        assert doc["neighbors"][0]["distance"] == 0.0

    def test_index_query_unknown_id_is_runtime_error(self, capsys, tmp_path):
        rc, _, err = run_cli(
            capsys, "index-query", "--index", str(tmp_path / "i.mldi"),
            "--store", str(tmp_path / "s.mlde"), "--query-id", "ghost",
        )
        assert rc == 2


class TestPipelineCommands:
    def make_catalog(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = []
        for gender, category, count in (("men", "shirts", 8), ("men", "shoes", 8)):
            for i in range(count):
                item_id = f"{gender}_{category}_{i:03d}"
                path = tmp_path / "imgs" / f"{item_id}.ppm"
                path.parent.mkdir(exist_ok=True)
                write_image(path, rng.random((3, 16, 16)) * 255.0)
                rows.append(
                    {
                        "id": item_id,
                        "image_path": str(path),
                        "gender": gender,
                        "category_key": category,
                    }
                )
        catalog = tmp_path / "catalog.jsonl"
        catalog.write_text("".join(json.dumps(r) + "\n" for r in rows))
        return catalog

    def test_pipeline_run_then_unchanged_then_mine(self, capsys, tmp_path):
        catalog = self.make_catalog(tmp_path)
        workdir = tmp_path / "work"

        rc, out, _ = run_cli(
            capsys, "pipeline-run", "--catalog", str(catalog),
            "--workdir", str(workdir), "--json",
        )
        assert rc == 0
        doc = json.loads(out)
        assert doc["features_extracted"] == 16
        assert doc["rows_full"] == 16
        assert (workdir / "results.jsonl").exists()
        first = (workdir / "results.jsonl").read_bytes()

        rc, out, _ = run_cli(
            capsys, "pipeline-run", "--catalog", str(catalog),
            "--workdir", str(workdir), "--json",
        )
        assert rc == 0
        doc = json.loads(out)
        assert doc["features_extracted"] == 0
        assert doc["rows_carried"] == 16
        assert (workdir / "results.jsonl").read_bytes() == first

        out_manifest = tmp_path / "mined.jsonl"
        rc, out, _ = run_cli(
            capsys, "mine-triplets", "--catalog", str(catalog),
            "--workdir", str(workdir), "--out", str(out_manifest),
            "--n", "4", "--in-class-fraction", "0.5",
            "--top-p", "2", "--neg-rank-lo", "3", "--neg-rank-hi", "5",
            "--seed", "1", "--json",
        )
        assert rc == 0
        doc = json.loads(out)
        assert doc["triplets"] == 4 and doc["in_class"] == 2
        records = load_manifest(out_manifest)
        assert len(records) == 4

    def test_mine_triplets_bad_fraction_is_usage_error(self, capsys, tmp_path):
        catalog = self.make_catalog(tmp_path)
        workdir = tmp_path / "work"
        rc, _, _ = run_cli(
            capsys, "pipeline-run", "--catalog", str(catalog), "--workdir", str(workdir)
        )
        assert rc == 0
        rc, _, err = run_cli(
            capsys, "mine-triplets", "--catalog", str(catalog),
            "--workdir", str(workdir), "--in-class-fraction", "1.5",
        )
        assert rc == 1
        assert "fraction" in err


class TestInstalledEntryPoint:
    def test_console_script_prints_param_count(self):
        proc = subprocess.run(
            ["mildnet", "params"], capture_output=True, text=True, timeout=120
        )
        assert proc.returncode == 0
        assert proc.stdout.strip() == "21927744"
