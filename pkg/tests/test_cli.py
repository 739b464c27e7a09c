import math

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import random_small_net
from vfscan import model_io
from vfscan.cli import main
from vfscan.fi import sfi_sample_size


@pytest.fixture(scope="module")
def tiny_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    rng = np.random.default_rng(77)
    net = random_small_net(rng, channels=(2, 3), size=6)
    imgs = rng.normal(0, 1, (6, 3, 6, 6)).astype(np.float32)
    labels = rng.integers(0, net.n_classes, 6).astype(np.uint16)
    model = str(d / "tiny.vglm")
    batch = str(d / "tiny.vglb")
    model_io.save_model(net, model)
    model_io.save_batch(imgs, labels, batch)
    return net, model, batch


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


class TestAnalyze:
    def test_complete_both_modes(self, tiny_pair, tmp_path):
        net, model, batch = tiny_pair
        out = str(tmp_path / "r.json")
        res = run_cli("analyze", "--model", model, "--batch", batch,
                      "--sampling", "complete", "--out", out)
        assert res.exit_code == 0, res.output
        assert "MVF_total" in res.output
        report = model_io.read_report(out)
        assert report["kind"] == "analysis"
        assert len(report["layers"]) == len(net.conv_layers)
        assert 0.0 <= report["mvf_total"] <= 1.0
        assert report["total_forwards"] > 0
        for row in report["layers"]:
            assert row["lvf_total"] == pytest.approx(
                (row["activations"] * row["lvf_act"]
                 + row["weights"] * row["lvf_weight"])
                / (row["activations"] + row["weights"]))

    def test_single_conv_toy_one_row(self, tmp_path):
        from vfscan.engine import LayerSpec, Network
        rng = np.random.default_rng(5)
        net = Network([
            LayerSpec("conv2d", inputs=(-1,),
                      weight=rng.normal(0, 1, (2, 1, 3, 3)).astype(np.float32),
                      kernel=3, stride=1, padding=1),
            LayerSpec("globalavgpool"),
            LayerSpec("flatten"),
            LayerSpec("linear", weight=rng.normal(0, 1, (2, 2)).astype(np.float32)),
        ], 2, (1, 4, 4))
        model, batch = str(tmp_path / "m.vglm"), str(tmp_path / "b.vglb")
        model_io.save_model(net, model)
        model_io.save_batch(rng.normal(0, 1, (3, 1, 4, 4)).astype(np.float32),
                            np.zeros(3, np.uint16), batch)
        out = str(tmp_path / "r.json")
        res = run_cli("analyze", "--model", model, "--batch", batch,
                      "--mode", "filters", "--out", out)
        assert res.exit_code == 0
        assert len(model_io.read_report(out)["layers"]) == 1

    def test_ratio_one_covers_all_channels(self, tiny_pair, tmp_path):
        net, model, batch = tiny_pair
        out = str(tmp_path / "r.json")
        res = run_cli("analyze", "--model", model, "--batch", batch,
                      "--mode", "filters", "--sampling", "ratio",
                      "--ratio", "1.0", "--out", out)
        assert res.exit_code == 0
        report = model_io.read_report(out)
        for layer in net.conv_layers:
            assert len(report["cvf"]["filters"][str(layer)]) == net.shapes[layer][0]

    def test_seed_reproducible_bytes(self, tiny_pair, tmp_path):
        _, model, batch = tiny_pair
        out = str(tmp_path / "r.json")
        outs = []
        for _ in range(2):
            res = run_cli("analyze", "--model", model, "--batch", batch,
                          "--sampling", "ratio", "--ratio", "0.5",
                          "--seed", "11", "--mode", "activations", "--out", out)
            assert res.exit_code == 0
            outs.append(open(out, "rb").read())
        assert outs[0] == outs[1]

    def test_worker_count_invariant_bytes(self, tiny_pair, tmp_path):
        _, model, batch = tiny_pair
        out = str(tmp_path / "w.json")
        blobs = []
        for workers in ("1", "3"):
            res = run_cli("analyze", "--model", model, "--batch", batch,
                          "--sampling", "ratio", "--ratio", "0.5", "--seed", "3",
                          "--mode", "filters", "--workers", workers, "--out", out)
            assert res.exit_code == 0
            blobs.append(open(out, "rb").read())
        assert blobs[0] == blobs[1]  # worker count is not echoed into reports

    def test_csv_output(self, tiny_pair, tmp_path):
        net, model, batch = tiny_pair
        out = str(tmp_path / "r.csv")
        res = run_cli("analyze", "--model", model, "--batch", batch,
                      "--mode", "filters", "--format", "csv", "--out", out)
        assert res.exit_code == 0
        lines = [l for l in open(out).read().splitlines() if l]
        assert len(lines) == 1 + len(net.conv_layers)

    def test_missing_model_errors(self, tiny_pair, tmp_path):
        _, _, batch = tiny_pair
        res = CliRunner().invoke(main, [
            "analyze", "--model", str(tmp_path / "none.vglm"), "--batch", batch,
            "--out", str(tmp_path / "r.json")])
        assert res.exit_code != 0


class TestFi:
    def test_exhaustive_weights_toy(self, tiny_pair, tmp_path):
        net, model, batch = tiny_pair
        out = str(tmp_path / "fi.json")
        res = run_cli("fi", "--model", model, "--batch", batch,
                      "--mode", "filters", "--sampling", "ratio",
                      "--ratio", "0.5", "--seed", "2", "--out", out)
        assert res.exit_code == 0, res.output
        report = model_io.read_report(out)
        assert report["kind"] == "fi"
        assert report["fi_mode"] == "exhaustive-weights"
        total = 0
        for layer in net.conv_layers:
            n = math.ceil(0.5 * net.shapes[layer][0])
            assert len(report["cvf"]["fi"][str(layer)]) == n
            total += sum(32 * int(np.prod(net.layers[layer].weight.shape[1:]))
                         for _ in range(n))
        assert report["simulations"]["injection_forwards"] == total

    def test_sfi_data_unaware_counts(self, tiny_pair, tmp_path):
        net, model, batch = tiny_pair
        out = str(tmp_path / "sfi.json")
        res = run_cli("fi", "--model", model, "--batch", batch,
                      "--mode", "filters", "--fi-mode", "sfi-data-unaware",
                      "--e", "0.2", "--t", "1.96", "--out", out)
        assert res.exit_code == 0
        report = model_io.read_report(out)
        want = sum(32 * sfi_sample_size(net.weights_in(layer), 0.2, 1.96, 0.5)
                   for layer in net.conv_layers)
        assert report["simulations"]["injection_forwards"] == want

    def test_fi_seed_reproducible(self, tiny_pair, tmp_path):
        _, model, batch = tiny_pair
        out = str(tmp_path / "f.json")
        blobs = []
        for _ in range(2):
            res = run_cli("fi", "--model", model, "--batch", batch,
                          "--fi-mode", "sfi-layerwise", "--e", "0.5",
                          "--seed", "8", "--out", out)
            assert res.exit_code == 0
            blobs.append(open(out, "rb").read())
        assert blobs[0] == blobs[1]


class TestCompare:
    def test_report_vs_itself_zero(self, tiny_pair, tmp_path):
        _, model, batch = tiny_pair
        fi_out = str(tmp_path / "fi.json")
        run_cli("fi", "--model", model, "--batch", batch, "--sampling", "ratio",
                "--ratio", "0.5", "--seed", "2", "--out", fi_out)
        cmp_out = str(tmp_path / "cmp.json")
        res = run_cli("compare", fi_out, fi_out, "--out", cmp_out)
        assert res.exit_code == 0
        assert model_io.read_report(cmp_out)["mae"] == 0.0

    def test_analysis_vs_fi_intersect(self, tiny_pair, tmp_path):
        _, model, batch = tiny_pair
        a_out = str(tmp_path / "a.json")
        run_cli("analyze", "--model", model, "--batch", batch, "--mode",
                "filters", "--sampling", "complete", "--out", a_out)
        fi_out = str(tmp_path / "fi.json")
        run_cli("fi", "--model", model, "--batch", batch, "--sampling", "ratio",
                "--ratio", "0.5", "--seed", "2", "--out", fi_out)
        cmp_out = str(tmp_path / "cmp.json")
        # strict mode must refuse the mismatched unit sets
        res = CliRunner().invoke(main, ["compare", a_out, fi_out, "--out", cmp_out])
        assert res.exit_code == 1
        res = run_cli("compare", a_out, fi_out, "--units", "intersect",
                      "--out", cmp_out)
        assert res.exit_code == 0
        report = model_io.read_report(cmp_out)
        assert 0.0 <= report["mae"] <= 1.0
        assert report["units_compared"] > 0
