import csv
import json
import math

import numpy as np
import pytest

from codescheme.cli import load_config, main, parse_config, read_dataset, read_measure, read_points
from codescheme.maps import LinearMap
from codescheme.spaces import ValidationError

GAP_CFG = """
# dense-net gap experiment
space.kind = ball
space.center = [0, 0, 0]
space.radius = 1.0
latent.kind = ball
latent.dimension = 2
distribution.kind = uniform-box
family.kind = dense
family.widths = [2, 3]
family.activation = relu   # inline comment
family.budgets = [1.0]
encode.net_eps = 0.2
train.outer_iterations = 2
n_train = 40
n_test = 200
replications = 3
bounds = dense_deep, hoeffding
n_grid = [20, 40]
n = 10000
delta = 0.05
"""


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def run(tmp_path, verb, cfg_text, *extra, name="run"):
    cfg = write(tmp_path / f"{name}.cfg", cfg_text)
    out = tmp_path / name
    return main([verb, "--config", str(cfg), "--out", str(out), *extra]), out


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestConfigParsing:
    def test_nested_and_typed(self):
        cfg = parse_config(GAP_CFG)
        assert cfg["space"] == {"kind": "ball", "center": [0, 0, 0], "radius": 1.0}
        assert cfg["family"]["activation"] == "relu"
        assert cfg["n_train"] == 40 and cfg["bounds"] == "dense_deep, hoeffding"

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# only a comment\n\na = 1 # trailing\n  # indented comment\nb = text value\n")
        assert cfg == {"a": 1, "b": "text value"}

    def test_conflicting_keys(self):
        with pytest.raises(ValidationError):
            parse_config("a = 1\na.b = 2\n")

    def test_malformed(self):
        with pytest.raises(ValidationError):
            parse_config("no delimiter here\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "absent.cfg")
        assert load_config(None) == {}


class TestFileFormats:
    def test_points_with_header_and_weights(self, tmp_path):
        p = write(tmp_path / "m.csv", "x,y,weight\n0,1,0.25\n2,3,0.75\n")
        pts, w = read_points(p)
        np.testing.assert_array_equal(pts, [[0, 1], [2, 3]])
        np.testing.assert_array_equal(w, [0.25, 0.75])
        mu = read_measure(p)
        np.testing.assert_array_equal(mu.weights, [0.25, 0.75])

    def test_measure_last_column(self, tmp_path):
        mu = read_measure(write(tmp_path / "m.csv", "0,0.5\n1,0.5\n"))
        np.testing.assert_array_equal(mu.atoms, [[0], [1]])

    def test_ragged(self, tmp_path):
        with pytest.raises(ValidationError):
            read_points(write(tmp_path / "r.csv", "0,1\n2\n"))

    def test_dataset_sidecar(self, tmp_path):
        p = write(tmp_path / "d.csv", "0.5\n1.5\n")
        write(tmp_path / "d.csv.space", 'kind = "box"\nlower = [0]\nupper = [2]\n')
        data = read_dataset(p)
        assert len(data) == 2 and data.space.diameter() == 2
        write(tmp_path / "e.csv", "3.0\n")
        with pytest.raises(ValidationError):
            read_dataset(tmp_path / "e.csv")


class TestVerbs:
    def test_gap_and_threads(self, tmp_path):
        code1, out1 = run(tmp_path, "gap", GAP_CFG, "--seed", "7", name="one")
        code4, out4 = run(tmp_path, "gap", GAP_CFG, "--seed", "7", "--threads", "4", name="four")
        assert code1 == code4 == 0
        assert (out1 / "gap.csv").read_bytes() == (out4 / "gap.csv").read_bytes()
        rows = read_rows(out1 / "gap.csv")
        assert len(rows) == 3 and "bound_dense_deep" in rows[0] and "bound_hoeffding" in rows[0]
        summary = json.loads((out1 / "gap.json").read_text())
        assert summary["seed"] == 7 and summary["failed"] == 0

    def test_seed_changes_output(self, tmp_path):
        _, a = run(tmp_path, "gap", GAP_CFG, "--seed", "1", name="a")
        _, b = run(tmp_path, "gap", GAP_CFG, "--seed", "2", name="b")
        assert (a / "gap.csv").read_bytes() != (b / "gap.csv").read_bytes()

    def test_rate(self, tmp_path):
        code, out = run(tmp_path, "rate", GAP_CFG)
        assert code == 0
        assert [int(r["n"]) for r in read_rows(out / "rate.csv")] == [20, 40]
        assert "slope" in json.loads((out / "rate.json").read_text())

    def test_bound(self, tmp_path):
        code, out = run(tmp_path, "bound", GAP_CFG)
        assert code == 0
        names = [r["name"] for r in json.loads((out / "bounds.json").read_text())["reports"]]
        assert names == ["dense_deep"]

    def test_bound_from_architecture(self, tmp_path):
        arch = {"kind": "dense", "lipschitz": [1.0], "budgets": [1.0], "latent_max_norm": 1.0,
                "data_diameter": 2.0, "widths": [2, 3], "budget_norm": "entrywise_l1"}
        write(tmp_path / "arch.json", json.dumps(arch))
        code, out = run(tmp_path, "bound", f"architecture = {tmp_path / 'arch.json'}\nn = 10000\ndelta = 0.05\n")
        assert code == 0
        reports = {r["name"]: r["value"] for r in json.loads((out / "bounds.json").read_text())["reports"]}
        assert reports["dense_deep"] == pytest.approx(0.480, rel=5e-3)
        assert reports["dense_wide"] == pytest.approx(20.45, rel=5e-3)

    def test_fit_encode_risk(self, tmp_path):
        code, fit_out = run(tmp_path, "fit", GAP_CFG, name="fit")
        assert code == 0
        for f in ("map.json", "fit.json", "trace.csv", "train.csv", "train.csv.space"):
            assert (fit_out / f).exists()
        trace = [float(r["risk"]) for r in read_rows(fit_out / "trace.csv")]
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
        use = (f"map = {fit_out / 'map.json'}\nlatent.kind = ball\nlatent.dimension = 2\n"
               f"data = {fit_out / 'train.csv'}\nencode.net_eps = 0.2\n")
        code, enc = run(tmp_path, "encode", use, name="enc")
        assert code == 0
        rows = read_rows(enc / "encoded.csv")
        assert list(rows[0]) == ["h0", "h1", "error"] and len(rows) == 40
        code, risk = run(tmp_path, "risk", use, name="risk")
        assert code == 0
        r = json.loads((risk / "risk.json").read_text())
        assert r["risk"] == pytest.approx(np.mean([float(x["error"]) for x in rows]), rel=1e-12)

    def test_wasserstein(self, tmp_path):
        write(tmp_path / "s.csv", "0,0.5\n1,0.5\n")
        write(tmp_path / "t.csv", "0,1\n")
        code, out = run(tmp_path, "wasserstein",
                        f"source = {tmp_path / 's.csv'}\ntarget = {tmp_path / 't.csv'}\np = 2\n")
        assert code == 0
        rep = json.loads((out / "wasserstein.json").read_text())
        assert rep["distance"] == pytest.approx(math.sqrt(0.5), abs=1e-12)
        assert len(read_rows(out / "coupling.csv")) == 2

    def test_wasserstein_unnormalized(self, tmp_path):
        write(tmp_path / "s.csv", "0,0.5\n1,0.7\n")
        write(tmp_path / "t.csv", "0,1\n")
        code, _ = run(tmp_path, "wasserstein", f"source = {tmp_path / 's.csv'}\ntarget = {tmp_path / 't.csv'}\n")
        assert code == 2

    def test_rd(self, tmp_path):
        write(tmp_path / "src.csv", "-1,0.5\n1,0.5\n")
        write(tmp_path / "alph.csv", "-1\n1\n")
        write(tmp_path / "vq.json", json.dumps(LinearMap.from_codewords([[-1.0], [1.0]]).to_dict()))
        cfg = (f"source = {tmp_path / 'src.csv'}\nalphabet = {tmp_path / 'alph.csv'}\n"
               f"slopes = [-0.01, -1, -100]\nrates = [0.3]\nmap = {tmp_path / 'vq.json'}\n"
               "latent.kind = codebook\nlatent.size = 2\nspace.kind = box\nspace.lower = [-1]\nspace.upper = [1]\n")
        code, out = run(tmp_path, "rd", cfg)
        assert code == 0
        rows = read_rows(out / "rd.csv")
        assert len(rows) == 4
        check = json.loads((out / "rd_check.json").read_text())
        assert check["holds"] and check["risk"] == 0

    def test_rd_needs_work(self, tmp_path):
        write(tmp_path / "src.csv", "-1,0.5\n1,0.5\n")
        code, _ = run(tmp_path, "rd", f"source = {tmp_path / 'src.csv'}\n")
        assert code == 2

    def test_cover(self, tmp_path):
        code, out = run(tmp_path, "cover", "M = 1\nd = 2\nk = 2\neps = [1.0, 0.5, 2.0]\n")
        assert code == 0
        rows = read_rows(out / "cover.csv")
        assert float(rows[0]["logN"]) == pytest.approx(math.log(9), abs=1e-12)
        assert float(rows[2]["logN"]) == 0.0


class TestExitCodes:
    def test_missing_key(self, tmp_path):
        assert run(tmp_path, "cover", "M = 1\nd = 2\n")[0] == 2

    def test_bad_value(self, tmp_path):
        assert run(tmp_path, "gap", GAP_CFG + "distribution.kind = nope\n")[0] == 2

    def test_bad_seed(self, tmp_path):
        assert run(tmp_path, "cover", "M = 1\nd = 2\nk = 2\neps = 1\n", "--seed", "-1")[0] == 2
        assert run(tmp_path, "cover", "M = 1\nd = 2\nk = 2\neps = 1\n", "--seed", str(2**64))[0] == 2

    def test_bad_threads(self, tmp_path):
        assert run(tmp_path, "gap", GAP_CFG, "--threads", "0")[0] == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["cover", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2

    def test_numerical_failure(self, tmp_path):
        write(tmp_path / "far.csv", "9.0\n9.0\n")
        write(tmp_path / "far.csv.space", 'kind = "box"\nlower = [-10]\nupper = [10]\n')
        cfg = (f"data = {tmp_path / 'far.csv'}\nlatent.kind = codebook\nlatent.size = 1\n"
               "family.widths = [1, 1]\nfamily.activation = identity\nfamily.init_scale = 0.01\n"
               "train.outer_iterations = 3\ntrain.param_step_size = 1e308\n")
        with np.errstate(over="ignore", invalid="ignore"):
            code, _ = run(tmp_path, "fit", cfg)
        assert code == 3
