import json

import numpy as np
import pytest

from ddslit.cli import main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run_cli("simulate", "--out", str(out), "--n", "32", "--seed", "11")
    assert code == 0
    return out


class TestSimulate:
    def test_outputs_written(self, simdir):
        names = {p.name for p in simdir.iterdir()}
        assert {"records.txt", "report.txt", "hist_y_L.csv", "hist_y_R.csv",
                "hist_t_L.csv", "hist_t_R.csv",
                "hist_joint_y.csv"} <= names

    def test_record_count(self, simdir):
        rows = [l for l in (simdir / "records.txt").read_text().splitlines()
                if not l.startswith("#")]
        assert len(rows) == 32

    def test_report_contents(self, simdir):
        text = (simdir / "report.txt").read_text()
        assert "seed: 11" in text
        assert "n_trajectories: 32" in text

    def test_deterministic_across_invocations(self, simdir, tmp_path):
        out2 = tmp_path / "again"
        assert run_cli("simulate", "--out", str(out2), "--n", "32",
                       "--seed", "11") == 0
        assert ((simdir / "records.txt").read_text()
                == (out2 / "records.txt").read_text())

    def test_worker_count_does_not_change_records(self, simdir, tmp_path,
                                                  monkeypatch):
        import ddslit.ensemble as ens
        monkeypatch.setattr(ens, "CHUNK", 8)
        out2 = tmp_path / "par"
        assert run_cli("simulate", "--out", str(out2), "--n", "32",
                       "--seed", "11", "--workers", "4") == 0
        assert ((simdir / "records.txt").read_text()
                == (out2 / "records.txt").read_text())

    def test_both_mode_doubles_records(self, tmp_path):
        out = tmp_path / "both"
        assert run_cli("simulate", "--out", str(out), "--n", "8",
                       "--seed", "3", "--mode", "both") == 0
        rows = [l for l in (out / "records.txt").read_text().splitlines()
                if not l.startswith("#")]
        assert len(rows) == 16
        assert sum(" collapse " in r for r in rows) == 8
        assert sum(" free " in r for r in rows) == 8

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_trajectories": 500,
                                   "sampler": {"seed": 99}}))
        out = tmp_path / "cfgrun"
        assert run_cli("simulate", "--config", str(cfg), "--out", str(out),
                       "--n", "8") == 0
        text = (out / "report.txt").read_text()
        assert "n_trajectories: 8" in text
        assert "seed: 99" in text

    def test_missing_config_exits_1(self, tmp_path, capsys):
        code = run_cli("simulate", "--config", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "o"))
        assert code == 1
        assert "nope.json" in capsys.readouterr().err

    def test_bad_config_key_exits_1(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"sigma_q": 1.0}))
        assert run_cli("simulate", "--config", str(cfg),
                       "--out", str(tmp_path / "o")) == 1

    def test_unknown_flag_exits_1(self, tmp_path):
        assert run_cli("simulate", "--out", str(tmp_path / "o"),
                       "--frobnicate") == 1

    def test_missing_out_exits_1(self):
        assert run_cli("simulate", "--n", "4") == 1


class TestTrajectories:
    def test_pairs_and_header(self, tmp_path):
        out = tmp_path / "traj"
        assert run_cli("trajectories", "--out", str(out), "--seed", "5",
                       "--paths", "2") == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["traj_000_collapse.csv", "traj_000_free.csv",
                         "traj_001_collapse.csv", "traj_001_free.csv"]
        lines = (out / "traj_000_collapse.csv").read_text().splitlines()
        assert lines[0] == "# t,x1,y1,x2,y2"
        ts = [float(l.split(",")[0]) for l in lines[1:]]
        assert ts == sorted(ts)
        assert ts[0] == 0.0

    def test_pair_shares_pre_collapse_path(self, tmp_path):
        out = tmp_path / "traj"
        assert run_cli("trajectories", "--out", str(out), "--seed", "5",
                       "--paths", "1") == 0
        col = (out / "traj_000_collapse.csv").read_text().splitlines()[1:]
        fre = (out / "traj_000_free.csv").read_text().splitlines()[1:]
        fre_by_t = dict(l.split(",", 1) for l in fre)
        shared = [l for l in col if l.split(",", 1)[0] in fre_by_t]
        assert len(shared) > 10
        for l in shared[:20]:
            t, rest = l.split(",", 1)
            assert fre_by_t[t] == rest or float(t) > 0.05

    def test_stride_thins_but_keeps_last(self, tmp_path):
        full = tmp_path / "full"
        thin = tmp_path / "thin"
        for out, stride in ((full, "1"), (thin, "25")):
            assert run_cli("trajectories", "--out", str(out), "--seed", "5",
                           "--paths", "1", "--stride", stride) == 0
        f = (full / "traj_000_free.csv").read_text().splitlines()
        t = (thin / "traj_000_free.csv").read_text().splitlines()
        assert len(t) < len(f) / 5
        assert t[-1] == f[-1]
        assert t[1] == f[1]

    def test_zero_stride_exits_1(self, tmp_path):
        assert run_cli("trajectories", "--out", str(tmp_path / "o"),
                       "--stride", "0") == 1


class TestSampleCheck:
    def test_equilibrium_passes(self, tmp_path):
        out = tmp_path / "chk"
        assert run_cli("sample-check", "--out", str(out), "--n", "4000",
                       "--seed", "2") == 0
        text = (out / "sample_check.txt").read_text()
        assert "mode: equilibrium" in text
        assert text.count("axis_") == 4

    def test_narrowed_passes(self, tmp_path):
        out = tmp_path / "chk"
        assert run_cli("sample-check", "--out", str(out), "--n", "4000",
                       "--seed", "2", "--sampler", "narrowed") == 0
        assert "mode: narrowed" in (out / "sample_check.txt").read_text()


class TestSweep:
    def test_two_placements(self, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep", "--out", str(out), "--n", "24", "--seed", "9",
                       "--x-left", "0.007", "0.015") == 0
        assert (out / "XL_0.007" / "records.txt").exists()
        assert (out / "XL_0.015" / "records.txt").exists()
        text = (out / "locality_report.txt").read_text()
        assert "pair: XL=0.007 vs XL=0.015" in text
        assert "p_value:" in text

    def test_reseed_changes_initial_points(self, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep", "--out", str(out), "--n", "16", "--seed", "9",
                       "--x-left", "0.01", "0.012", "--reseed") == 0
        a = (out / "XL_0.01" / "records.txt").read_text()
        b = (out / "XL_0.012" / "records.txt").read_text()
        # distinct substreams: right-side detections must not coincide
        ya = [l.split()[4] for l in a.splitlines() if not l.startswith("#")]
        yb = [l.split()[4] for l in b.splitlines() if not l.startswith("#")]
        assert ya != yb

    def test_single_placement_exits_1(self, tmp_path):
        assert run_cli("sweep", "--out", str(tmp_path / "o"),
                       "--x-left", "0.01") == 1
