import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from icedude.bench import ExperimentConfig, read_rows, write_symbol_text
from icedude.cli import _FIELD_TYPES, build_parser, config_from_args, main

FAST = ["--n", "3000", "--ks", "2", "--epochs", "1", "--hidden", "8", "--ice-iters", "1", "--bw-iters", "3"]


def test_every_config_field_has_a_flag():
    import dataclasses
    assert set(_FIELD_TYPES) == {f.name for f in dataclasses.fields(ExperimentConfig)}
    help_text = build_parser()._subparsers._group_actions[0].choices["run"].format_help()
    for name in _FIELD_TYPES:
        assert "--" + name.replace("_", "-") in help_text


def test_flags_map_onto_config():
    args = build_parser().parse_args(["run", "--source", "dna", "--delta0s", "0.05", "0.4", "--two-phase",
                                      "--ks", "3", "5", "--lr-later", "0.01"])
    cfg = config_from_args(args)
    assert (cfg.source, cfg.delta0s, cfg.two_phase, cfg.ks, cfg.lr_later) == ("dna", (0.05, 0.4), True, (3, 5), 0.01)


def test_run_writes_csv_and_manifest(tmp_path, capsys):
    code = main(["run", *FAST, "--denoisers", "fb", "dude", "--output-dir", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "exp.csv")
    assert {r.denoiser for r in rows} == {"fb", "dude"}
    manifest = json.loads((tmp_path / "exp.manifest.json").read_text())
    assert manifest["config"]["denoisers"] == ["fb", "dude"]
    assert "normalized_error" in capsys.readouterr().out


def test_config_from_manifest(tmp_path):
    assert main(["run", *FAST, "--denoisers", "dude", "--output-dir", str(tmp_path)]) == 0
    args = build_parser().parse_args(["run", "--config", str(tmp_path / "exp.manifest.json"), "--ks", "4"])
    cfg = config_from_args(args)
    assert cfg.n == 3000 and cfg.ks == (4,) and cfg.denoisers == ("dude",)


def test_failure_exit_code(tmp_path):
    code = main(["run", *FAST, "--source", "images", "--image-count", "1", "--image-size", "24",
                 "--denoisers", "fb", "cude", "--output-dir", str(tmp_path)])
    assert code == 1
    rows = read_rows(tmp_path / "exp.csv")
    assert {r.denoiser: r.status for r in rows} == {"fb": "failed", "cude": "ok"}


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as err:
        main(["run", "--denoisers", "magic"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_sweep_delta(tmp_path, capsys):
    assert main(["sweep-delta", *FAST, "--denoisers", "cude-pi0", "--deltas", "0.05", "0.2",
                 "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "exp.spread.csv").exists()
    assert "spread cude-pi0" in capsys.readouterr().out


def test_sweep_k(tmp_path):
    assert main(["sweep-k", *FAST, "--denoisers", "dude", "--k-values", "1", "2",
                 "--output-dir", str(tmp_path)]) == 0
    assert [r.k for r in read_rows(tmp_path / "exp.csv")] == [1, 2]


def test_sweep_alphabet(tmp_path):
    assert main(["sweep-alphabet", *FAST, "--sizes", "2", "3", "--output-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "exp.csv")
    assert {r.experiment_id for r in rows} == {"exp-x2", "exp-x3"}
    assert {r.denoiser for r in rows} >= {"fb", "cude", "ice-ndude", "ice-cude"}


def test_estimate_channel_on_noisy_file(tmp_path, capsys):
    write_symbol_text(tmp_path / "z.txt", np.random.default_rng(1).integers(2, size=3000))
    code = main(["estimate-channel", "--inputs", str(tmp_path / "z.txt"), "--ks", "2", "--epochs", "1",
                 "--hidden", "8", "--ice-iters", "1", "--output-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "exp.k2.d0.1.channel.txt").exists()
    assert "delta0=0.1" in capsys.readouterr().out


def test_denoise_writes_outputs(tmp_path):
    write_symbol_text(tmp_path / "z.txt", np.random.default_rng(2).integers(2, size=2000))
    code = main(["denoise", "--inputs", str(tmp_path / "z.txt"), "--ks", "2", "--epochs", "1",
                 "--hidden", "8", "--ice-iters", "1", "--denoisers", "ice-cude",
                 "--output-dir", str(tmp_path / "o")])
    assert code == 0
    assert (tmp_path / "o" / "z.ice-cude-k2-d0.1.txt").exists()


@pytest.mark.skipif(shutil.which("icedude") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = subprocess.run(["icedude", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("icedude")


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "icedude.cli", "run", *FAST, "--denoisers", "dude"],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr


def test_empty_delta_sweep_succeeds(tmp_path):
    assert main(["sweep-delta", *FAST, "--deltas"]) == 0
