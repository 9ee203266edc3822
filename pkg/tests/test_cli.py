import json
import re

import pytest

from app.cli import EXIT_CERTIFIED, EXIT_NOT_CERTIFIED, EXIT_USER_ERROR, build_config, build_parser, main


def system(systems_dir, name: str) -> str:
    return str(systems_dir / f"{name}.sys")


class TestConfig:
    def test_flags_override_file(self, tmp_path, systems_dir):
        config_file = tmp_path / "run.cfg"
        config_file.write_text("mode = ifp\nvdeg = 6\nradii = 0.5, 1.0\n")
        args = build_parser().parse_args(
            ["index", system(systems_dir, "static_unity"), "--config", str(config_file), "--vdeg", "2"]
        )
        config = build_config(args)
        assert config.mode == "ifp"
        assert config.vdeg == 2
        assert config.radii == [0.5, 1.0]

    def test_index_defaults_to_ofp(self, systems_dir):
        args = build_parser().parse_args(["index", system(systems_dir, "static_unity")])
        assert build_config(args).mode == "ofp"


class TestExitCodes:
    def test_verify_certified(self, systems_dir, capsys):
        assert main(["verify", system(systems_dir, "stable")]) == EXIT_CERTIFIED
        doc = json.loads(capsys.readouterr().out)
        assert doc["schema_version"] == 1
        assert doc["kind"] == "stability"
        assert doc["V"]["vars"] == ["x1"]
        assert doc["report"]["verdict"] == "valid"

    def test_verify_not_certified(self, systems_dir, capsys):
        assert main(["verify", system(systems_dir, "unstable")]) == EXIT_NOT_CERTIFIED
        doc = json.loads(capsys.readouterr().out)
        assert doc["certified"] is False
        assert doc["system"] == "unstable"

    def test_missing_file(self, tmp_path, capsys):
        assert main(["verify", str(tmp_path / "missing.sys")]) == EXIT_USER_ERROR
        assert "error:" in capsys.readouterr().err

    def test_bad_mode(self, systems_dir):
        assert main(["verify", system(systems_dir, "stable"), "--mode", "gain"]) == EXIT_USER_ERROR

    def test_unknown_command(self):
        assert main(["certify"]) == EXIT_USER_ERROR

    def test_sweep_needs_radii(self, systems_dir):
        assert main(["sweep", system(systems_dir, "static_unity")]) == EXIT_USER_ERROR

    def test_index_without_outputs(self, systems_dir):
        assert main(["index", system(systems_dir, "stable")]) == EXIT_USER_ERROR


class TestOutputs:
    def test_index_prints_value(self, systems_dir, capsys):
        assert main(["index", system(systems_dir, "static_double")]) == EXIT_CERTIFIED
        captured = capsys.readouterr()
        assert captured.err.startswith("rho = 0.5")
        assert "certificate sha256" in captured.err
        assert json.loads(captured.out)["index_name"] == "rho"

    def test_export_to_file(self, systems_dir, tmp_path, capsys):
        out = tmp_path / "static.dat-s"
        code = main(["export", system(systems_dir, "static_unity"), "--mode", "ofp", "--out", str(out)])
        assert code == EXIT_CERTIFIED
        assert out.read_text().splitlines()[:3] == ["1", "2", "1 -2"]
        assert "free variables 1" in capsys.readouterr().err

    @pytest.mark.slow
    def test_sweep_csv(self, systems_dir, capsys):
        code = main(["sweep", system(systems_dir, "motivational"), "--radii", "0.5,0.8", "--workers", "1"])
        assert code == EXIT_CERTIFIED
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "r,index,status"
        assert [line.split(",")[0] for line in lines[1:]] == ["0.5", "0.8"]

    @pytest.mark.slow
    def test_single_radius_sweep_hash_matches_index(self, systems_dir, capsys):
        path = system(systems_dir, "motivational")
        assert main(["index", path, "--radius", "0.5"]) == EXIT_CERTIFIED
        index_hashes = re.findall(r"certificate sha256 ([0-9a-f]{64})", capsys.readouterr().err)
        assert main(["sweep", path, "--radii", "0.5", "--workers", "1"]) == EXIT_CERTIFIED
        sweep_hashes = re.findall(r"r=0\.5 certificate sha256 ([0-9a-f]{64})", capsys.readouterr().err)
        assert len(index_hashes) == 1
        assert sweep_hashes == index_hashes
