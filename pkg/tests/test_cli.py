import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from ticir import BackboneConfig, MetricsReport, save_mock_backbone
from ticir.cli import build_service, main

from conftest import synthetic_image


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def workspace(tmp_path):
    """Backbone dir, image corpus, vocabulary and annotation fixtures."""
    backbone_dir = tmp_path / "backbone"
    save_mock_backbone(backbone_dir, BackboneConfig(feature_dim=16, token_dim=16, context_length=32, seed=7))

    images_dir = tmp_path / "images"
    images_dir.mkdir()
    for i in range(6):
        Image.fromarray(synthetic_image(f"cli{i}")).save(images_dir / f"cli{i}.png")

    vocab_path = tmp_path / "vocab.txt"
    vocab_path.write_text("\n".join(["dog", "cat", "red car", "lamp"]) + "\n")

    return {
        "root": tmp_path,
        "backbone": backbone_dir,
        "images": images_dir,
        "vocab": vocab_path,
    }


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestGenPhrases:
    def test_tiny_vocab(self, runner, workspace):
        out = workspace["root"] / "bank.json"
        run_ok(runner, ["gen-phrases", "--vocab", str(workspace["vocab"]), "--out", str(out),
                        "--n", "3", "--seed", "2"])
        bank = json.loads(out.read_text())
        assert set(bank) == {"dog", "cat", "red car", "lamp"}
        assert all(len(v) == 3 for v in bank.values())

    def test_missing_vocab_exits_2(self, runner, workspace):
        result = runner.invoke(main, ["gen-phrases", "--vocab", "nope.txt",
                                      "--out", str(workspace["root"] / "bank.json")])
        assert result.exit_code == 2
        assert not (workspace["root"] / "bank.json").exists()

    def test_seeded_runs_are_byte_identical(self, runner, workspace):
        a, b = workspace["root"] / "a.json", workspace["root"] / "b.json"
        for out in (a, b):
            run_ok(runner, ["gen-phrases", "--vocab", str(workspace["vocab"]), "--out", str(out),
                            "--n", "4", "--seed", "9"])
        assert a.read_bytes() == b.read_bytes()

    def test_config_file_and_flag_precedence(self, runner, workspace):
        config = workspace["root"] / "run.toml"
        config.write_text(f'vocab = "{workspace["vocab"]}"\nn = 5\nseed = 1\n')
        out = workspace["root"] / "bank.json"
        run_ok(runner, ["gen-phrases", "--config", str(config), "--out", str(out), "--n", "2"])
        bank = json.loads(out.read_text())
        assert all(len(v) == 2 for v in bank.values())  # flag beat the config value


@pytest.fixture()
def pipeline(runner, workspace):
    """gen-phrases + invert + build-index artifacts shared by later stages."""
    root = workspace["root"]
    bank = root / "bank.json"
    tokens = root / "tokens.bin"
    index = root / "index.bin"
    run_ok(runner, ["gen-phrases", "--vocab", str(workspace["vocab"]), "--out", str(bank), "--n", "3"])
    run_ok(runner, ["invert", "--backbone", str(workspace["backbone"]), "--images", str(workspace["images"]),
                    "--vocab", str(workspace["vocab"]), "--bank", str(bank), "--out", str(tokens),
                    "--iterations", "8", "--k-concepts", "2", "--seed", "3"])
    run_ok(runner, ["build-index", "--backbone", str(workspace["backbone"]),
                    "--images", str(workspace["images"]), "--out", str(index)])
    workspace.update(bank=bank, tokens=tokens, index=index)
    return workspace


class TestInvert:
    def test_token_set_written(self, pipeline):
        from ticir import PseudoTokenSet

        tokens = PseudoTokenSet.load(pipeline["tokens"])
        assert len(tokens) == 6

    def test_zero_iterations_gives_init_tokens(self, runner, pipeline):
        out = pipeline["root"] / "init_tokens.bin"
        run_ok(runner, ["invert", "--backbone", str(pipeline["backbone"]), "--images", str(pipeline["images"]),
                        "--vocab", str(pipeline["vocab"]), "--bank", str(pipeline["bank"]),
                        "--out", str(out), "--iterations", "0", "--k-concepts", "2"])
        from ticir import PseudoTokenSet

        assert len(PseudoTokenSet.load(out)) == 6

    def test_resume_skips_existing(self, runner, pipeline, caplog):
        result = run_ok(runner, ["invert", "--backbone", str(pipeline["backbone"]),
                                 "--images", str(pipeline["images"]),
                                 "--vocab", str(pipeline["vocab"]), "--bank", str(pipeline["bank"]),
                                 "--out", str(pipeline["tokens"]), "--iterations", "8",
                                 "--k-concepts", "2", "--seed", "3", "--resume"])
        from ticir import PseudoTokenSet

        assert len(PseudoTokenSet.load(pipeline["tokens"])) == 6

    def test_seeded_reproducibility(self, runner, pipeline):
        a, b = pipeline["root"] / "rep_a.bin", pipeline["root"] / "rep_b.bin"
        for out in (a, b):
            run_ok(runner, ["invert", "--backbone", str(pipeline["backbone"]),
                            "--images", str(pipeline["images"]),
                            "--vocab", str(pipeline["vocab"]), "--bank", str(pipeline["bank"]),
                            "--out", str(out), "--iterations", "5", "--k-concepts", "2", "--seed", "4",
                            "--workers", "2"])
        assert a.read_bytes() == b.read_bytes()


class TestTrainInverter:
    def test_checkpoint_and_log(self, runner, pipeline):
        ckpt = pipeline["root"] / "net.ckpt"
        log = pipeline["root"] / "train.jsonl"
        run_ok(runner, ["train-inverter", "--backbone", str(pipeline["backbone"]),
                        "--images", str(pipeline["images"]), "--tokens", str(pipeline["tokens"]),
                        "--vocab", str(pipeline["vocab"]), "--bank", str(pipeline["bank"]),
                        "--out", str(ckpt), "--log", str(log),
                        "--epochs", "2", "--batch-size", "4", "--k-concepts", "2"])
        from ticir import load_checkpoint

        net, header = load_checkpoint(ckpt)
        assert header["input_dim"] == 16
        entries = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(entries) == 2
        assert {"epoch", "loss", "loss_distil", "loss_gpt"} == set(entries[0])

    def test_zero_epochs_init_checkpoint(self, runner, pipeline):
        ckpt = pipeline["root"] / "init.ckpt"
        run_ok(runner, ["train-inverter", "--backbone", str(pipeline["backbone"]),
                        "--images", str(pipeline["images"]), "--tokens", str(pipeline["tokens"]),
                        "--out", str(ckpt), "--epochs", "0", "--lambda-reg", "0"])
        assert ckpt.exists()

    def test_reg_requires_vocab_and_bank(self, runner, pipeline):
        result = runner.invoke(main, ["train-inverter", "--backbone", str(pipeline["backbone"]),
                                      "--images", str(pipeline["images"]), "--tokens", str(pipeline["tokens"]),
                                      "--out", str(pipeline["root"] / "x.ckpt"), "--epochs", "1"])
        assert result.exit_code == 2


@pytest.fixture()
def trained(runner, pipeline):
    ckpt = pipeline["root"] / "net.ckpt"
    run_ok(runner, ["train-inverter", "--backbone", str(pipeline["backbone"]),
                    "--images", str(pipeline["images"]), "--tokens", str(pipeline["tokens"]),
                    "--vocab", str(pipeline["vocab"]), "--bank", str(pipeline["bank"]),
                    "--out", str(ckpt), "--epochs", "2", "--batch-size", "4", "--k-concepts", "2"])
    pipeline.update(checkpoint=ckpt)
    return pipeline


def write_queries(path, entries):
    path.write_text(json.dumps(entries))
    return path


class TestRetrieve:
    def test_inversion_with_checkpoint(self, runner, trained):
        queries = write_queries(trained["root"] / "queries.json", [
            {"query_id": "qa", "reference_id": "cli0", "captions": ["shows more detail"]},
            {"query_id": "qb", "reference_id": "cli1", "captions": ["is darker", "has a lamp"],
             "shared_concept": "an indoor scene"},
        ])
        out = trained["root"] / "rankings.json"
        run_ok(runner, ["retrieve", "--backbone", str(trained["backbone"]), "--index", str(trained["index"]),
                        "--queries", str(queries), "--mode", "inversion",
                        "--checkpoint", str(trained["checkpoint"]), "--images", str(trained["images"]),
                        "-k", "4", "--out", str(out)])
        payload = json.loads(out.read_text())
        assert set(payload["rankings"]) == {"qa", "qb"}
        assert all(len(ranked) == 4 for ranked in payload["rankings"].values())

    def test_inversion_with_token_set(self, runner, trained):
        queries = write_queries(trained["root"] / "q2.json",
                                [{"query_id": "q", "reference_id": "cli2", "captions": ["is brighter"]}])
        out = trained["root"] / "rankings_tokens.json"
        run_ok(runner, ["retrieve", "--backbone", str(trained["backbone"]), "--index", str(trained["index"]),
                        "--queries", str(queries), "--mode", "inversion",
                        "--tokens", str(trained["tokens"]), "-k", "3", "--out", str(out)])
        assert len(json.loads(out.read_text())["rankings"]["q"]) == 3

    def test_baseline_modes(self, runner, trained):
        queries = write_queries(trained["root"] / "q3.json", [
            {"query_id": "t", "mode": "text_only", "captions": ["a bright photo"]},
            {"query_id": "i", "mode": "image_only", "reference_id": "cli3"},
            {"query_id": "it", "mode": "image_plus_text", "reference_id": "cli3", "captions": ["is outside"]},
        ])
        out = trained["root"] / "rankings_base.json"
        run_ok(runner, ["retrieve", "--backbone", str(trained["backbone"]), "--index", str(trained["index"]),
                        "--queries", str(queries), "--mode", "text_only", "-k", "2", "--out", str(out)])
        payload = json.loads(out.read_text())
        assert payload["rankings"]["i"][0][0] == "cli3"  # the reference is its own best match

    def test_captioning_mode_needs_adapter_output(self, runner, trained):
        queries = write_queries(trained["root"] / "q4.json",
                                [{"query_id": "c", "mode": "captioning", "reference_id": "cli0",
                                  "captions": ["is at night"]}])
        result = runner.invoke(main, ["retrieve", "--backbone", str(trained["backbone"]),
                                      "--index", str(trained["index"]), "--queries", str(queries),
                                      "--out", str(trained["root"] / "x.json")])
        assert result.exit_code == 2

        captions = trained["root"] / "caps.json"
        captions.write_text(json.dumps({"cli0": "a colorful textured square"}))
        run_ok(runner, ["retrieve", "--backbone", str(trained["backbone"]), "--index", str(trained["index"]),
                        "--queries", str(queries), "--captioner-output", str(captions),
                        "-k", "2", "--out", str(trained["root"] / "rank_cap.json")])

    def test_unknown_mode_exits_2(self, runner, trained):
        queries = write_queries(trained["root"] / "q5.json",
                                [{"query_id": "q", "mode": "psychic", "captions": ["x"]}])
        result = runner.invoke(main, ["retrieve", "--backbone", str(trained["backbone"]),
                                      "--index", str(trained["index"]), "--queries", str(queries),
                                      "--out", str(trained["root"] / "x.json")])
        assert result.exit_code == 2

    def test_conflicting_token_sources(self, runner, trained):
        queries = write_queries(trained["root"] / "q6.json",
                                [{"query_id": "q", "reference_id": "cli0", "captions": ["x"]}])
        result = runner.invoke(main, ["retrieve", "--backbone", str(trained["backbone"]),
                                      "--index", str(trained["index"]), "--queries", str(queries),
                                      "--mode", "inversion", "--checkpoint", str(trained["checkpoint"]),
                                      "--tokens", str(trained["tokens"]),
                                      "--out", str(trained["root"] / "x.json")])
        assert result.exit_code == 2


class TestEvaluate:
    def _rankings_and_dataset(self, trained):
        ranked = ["cli1", "cli2", "cli3", "cli4"]
        rankings = {"rankings": {"q0": [[i, 0.9] for i in ranked]}}
        rankings_path = trained["root"] / "rank_eval.json"
        rankings_path.write_text(json.dumps(rankings))
        dataset = [{
            "id": "q0", "reference_img_id": "cli0", "relative_caption": "has a different layout",
            "shared_concept": "a pattern", "gt_img_ids": ["cli2", "cli4"],
            "semantic_aspects": ["Addition"], "split": "val",
        }]
        dataset_path = trained["root"] / "dataset.json"
        dataset_path.write_text(json.dumps(dataset))
        return rankings_path, dataset_path

    def test_circo_plan_report(self, runner, trained):
        rankings_path, dataset_path = self._rankings_and_dataset(trained)
        out = trained["root"] / "report.json"
        csv_out = trained["root"] / "report.csv"
        run_ok(runner, ["evaluate", "--dataset", str(dataset_path), "--format", "circo",
                        "--rankings", str(rankings_path), "--out", str(out), "--csv", str(csv_out),
                        "--plan", "circo"])
        report = MetricsReport.from_json_dict(json.loads(out.read_text()))
        assert sorted(report.metrics["map"]) == [5, 10, 25, 50]
        assert csv_out.read_text().startswith("metric,K=")

    def test_bad_format_exits_2(self, runner, trained):
        rankings_path, dataset_path = self._rankings_and_dataset(trained)
        result = runner.invoke(main, ["evaluate", "--dataset", str(dataset_path), "--format", "vibes",
                                      "--rankings", str(rankings_path),
                                      "--out", str(trained["root"] / "x.json")])
        assert result.exit_code == 2
        assert not (trained["root"] / "x.json").exists()


class TestServe:
    def test_build_service_wiring(self, trained):
        service = build_service(str(trained["backbone"]), str(trained["images"]), str(trained["index"]),
                                checkpoint_path=str(trained["checkpoint"]), seed=0,
                                data_dir=str(trained["root"] / "svc"))
        health = service.health()
        assert health["status"] == "ready"
        assert health["index_size"] == 6

    def test_missing_index_exits_2(self, runner, trained):
        result = runner.invoke(main, ["serve", "--backbone", str(trained["backbone"]),
                                      "--images", str(trained["images"]), "--index", "missing.bin"])
        assert result.exit_code == 2
