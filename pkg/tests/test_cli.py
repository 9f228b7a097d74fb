import json
from fractions import Fraction

import numpy as np
import pytest

from susygan import cli, gan
from susygan.dataset import load_dataset, load_samples
from susygan.errors import ConfigError

TOY = ["--grid", "16", "--count", "64", "--batch", "8", "--noise-dim", "8", "--eval-every", "5",
       "--eval-noises", "4", "--snapshots", "10,20", "--disc-widths", "2,2,2,2",
       "--gen-base-channels", "4", "--gen-widths", "4,4,4", "--seed", "5"]


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def toy_run(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli(capsys, "synth", *TOY, "--out", out)[0] == 0
    assert run_cli(capsys, "train", *TOY, "--steps", 20, "--out", out)[0] == 0
    return out


def test_defaults_match_headline_experiment():
    c = cli.RunConfig()
    assert (c.degree, c.coeff_range, c.box, c.grid, c.count) == (2, 1.0, 2.0, 64, 10_000)
    assert (c.batch, c.lr, c.decay, c.noise_dim, c.eval_noises, c.snapshots) == \
        (256, 2e-4, 6e-8, 100, 16, (100, 1000, 20_000))
    assert c.degrees == (2, 3, 5) and c.prominence == 0.01


def test_config_text_round_trip():
    c = cli.RunConfig(lr=1e-3, snapshots=(3, 7), disc_steps_per_gen_step=Fraction(3, 2),
                      export_images=True, out="x y", degrees=(1,), coeff_range=0.1 + 0.2)
    assert cli.RunConfig.from_text(c.to_text()) == c
    assert cli.RunConfig.from_text(cli.RunConfig().to_text()) == cli.RunConfig()


def test_config_parse_errors():
    with pytest.raises(ConfigError):
        cli.RunConfig.from_text("nonsense = 1\n")
    with pytest.raises(ConfigError):
        cli.RunConfig.from_text("batch = many\n")
    with pytest.raises(ConfigError):
        cli.RunConfig.from_text("just words\n")
    assert cli.RunConfig.from_text("# comment\n\nbatch = 4  # trailing\n").batch == 4


def test_synth_single_sample(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "synth", "--count", 1, "--grid", 16, "--out", tmp_path)
    assert code == 0
    assert len(load_dataset(tmp_path / "dataset.hgrd")) == 1
    assert json.loads(out)["count"] == 1
    echoed = cli.RunConfig.from_text((tmp_path / "config.txt").read_text())
    assert echoed.count == 1 and echoed.grid == 16 and echoed.batch == 256


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run_cli(capsys, "synth", "--count", 1, "--grid", 16, "--out", blocker / "sub")
    assert code == cli.EXIT_IO and "synth" in err


def test_bad_flag_value_is_config_error(tmp_path, capsys):
    assert run_cli(capsys, "synth", "--grid", 18, "--out", tmp_path)[0] == cli.EXIT_CONFIG
    assert run_cli(capsys, "synth", "--batch", "x", "--out", tmp_path)[0] == cli.EXIT_CONFIG


def test_train_outputs(toy_run):
    hist = gan.read_metrics(toy_run / "metrics.csv")
    assert [r["step"] for r in hist] == [0, 5, 10, 15, 20]
    assert sorted(p.name for p in (toy_run / "snapshots").iterdir()) == ["step_000010.hsnp", "step_000020.hsnp"]
    domain, grids = load_samples(toy_run / "samples" / "step_000010.hsmp")
    assert grids.shape == (4, 16, 16, 2) and domain.n == 16
    for name in ("generator.hprm", "discriminator.hprm", "final.hsnp", "config.txt"):
        assert (toy_run / name).exists()


def test_train_missing_dataset(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train", *TOY, "--out", tmp_path, "--data", tmp_path / "nope.hgrd")
    assert code == cli.EXIT_IO and "nope.hgrd" in err


def test_train_grid_mismatch(toy_run, capsys):
    args = [a if a != "16" else "24" for a in TOY]
    code, _, _ = run_cli(capsys, "train", *args, "--out", toy_run.parent / "other",
                         "--data", toy_run / "dataset.hgrd")
    assert code == cli.EXIT_FORMAT


def test_resume_matches_uninterrupted(toy_run, tmp_path, capsys):
    code, _, _ = run_cli(capsys, "train", *TOY, "--steps", 20, "--out", tmp_path / "resumed",
                         "--data", toy_run / "dataset.hgrd",
                         "--resume", toy_run / "snapshots" / "step_000010.hsnp")
    assert code == 0
    assert (tmp_path / "resumed" / "metrics.csv").read_bytes() == (toy_run / "metrics.csv").read_bytes()
    code, _, _ = run_cli(capsys, "train", *TOY, "--lr", "0.5", "--out", tmp_path / "x",
                         "--data", toy_run / "dataset.hgrd",
                         "--resume", toy_run / "snapshots" / "step_000010.hsnp")
    assert code == cli.EXIT_FORMAT


def test_echoed_config_reproduces_run(toy_run, tmp_path, capsys):
    again = tmp_path / "again"
    cfg_text = (toy_run / "config.txt").read_text().replace(f"out = {toy_run}", f"out = {again}")
    (tmp_path / "c.txt").write_text(cfg_text)
    assert run_cli(capsys, "synth", "--config", tmp_path / "c.txt")[0] == 0
    assert run_cli(capsys, "train", "--config", tmp_path / "c.txt")[0] == 0
    for name in ("dataset.hgrd", "metrics.csv", "generator.hprm", "final.hsnp"):
        assert (again / name).read_bytes() == (toy_run / name).read_bytes(), name


def test_report_and_images(toy_run, capsys):
    code, out, _ = run_cli(capsys, "report", *TOY, "--out", toy_run, "--report-count", 12)
    assert code == 0
    assert not (toy_run / "report" / "images").exists()
    summary = json.loads((toy_run / "report" / "report.json").read_text())
    assert summary["generated"]["count"] == 12 and summary["training"]["count"] == 64
    assert max(summary["training"]["mean_fit_costs"].values()) <= 1e-10
    assert summary["training"]["multi_minima_fraction"] == 0

    code, _, _ = run_cli(capsys, "report", *TOY, "--out", toy_run, "--report-count", 12,
                         "--export-images", "true", "--image-count", 2)
    assert code == 0
    images = sorted((toy_run / "report" / "images").glob("*.pgm"))
    assert len(images) == 6
    raw = images[0].read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == len(b"P5\n16 16\n255\n") + 256
    ranges = (toy_run / "report" / "images" / "ranges.txt").read_text().splitlines()
    assert len(ranges) == 6 and "min=" in ranges[0]


def test_report_checkpoint_mismatch(toy_run, capsys):
    args = [a if a != "4,4,4" else "8,8,8" for a in TOY]
    assert run_cli(capsys, "report", *args, "--out", toy_run)[0] == cli.EXIT_FORMAT


def test_validate(toy_run, capsys):
    code, out, _ = run_cli(capsys, "validate", toy_run / "dataset.hgrd")
    assert code == 0
    res = json.loads(out)
    assert res["count"] == 64 and res["multi_minima_fraction"] == 0
    assert res["residuals"]["ratio"] < 1e-6  # float32 storage limits the file's exactness
    code, out, _ = run_cli(capsys, "validate", toy_run / "samples" / "step_000020.hsmp")
    assert code == 0 and json.loads(out)["count"] == 4
    (toy_run / "junk").write_bytes(b"JUNK" + bytes(10))
    assert run_cli(capsys, "validate", toy_run / "junk")[0] == cli.EXIT_FORMAT


def test_thread_cap_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HOLO_THREADS", "1")
    assert run_cli(capsys, "synth", "--count", 2, "--grid", 8, "--out", tmp_path)[0] == 0


def test_numeric_fault_writes_diagnostic(toy_run, capsys, monkeypatch):
    real_step = gan.generator_step

    def poisoned(state):
        state.gen.params[1]["kernel"][0, 0] = np.nan
        return real_step(state)
    monkeypatch.setattr(gan, "generator_step", poisoned)
    code, _, err = run_cli(capsys, "train", *TOY, "--steps", 3, "--out", toy_run)
    assert code == cli.EXIT_NUMERIC and "non-finite" in err
    assert gan.restore(toy_run / "fault.hsnp").step == 0
