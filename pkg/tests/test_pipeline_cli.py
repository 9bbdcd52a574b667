import json
from dataclasses import replace

import numpy as np
import pytest

from biphoton.cli import main
from biphoton.config import ControlConfig, StackPaths, dump_config
from biphoton.core import CorrelationMap, MapKind, Plane
from biphoton.pipeline import (
    PipelineError,
    affine_fit,
    acquire,
    predicted_volume_ratio,
    reproducible_part,
    run_pipeline,
    run_sweep,
    save_map,
)
from biphoton.render import read_pgm
from biphoton.stackio import write_stack


def test_entangled_config_violates(small_config, tmp_path):
    report = run_pipeline(small_config, tmp_path)
    assert report["epr"]["violated"]
    assert report["epr"]["product_hbar2"] < 0.25
    for name in ("report.json", "map_image.json", "map_pupil.json", "map_image.pgm", "map_pupil.pgm"):
        assert (tmp_path / name).exists()
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["provenance"]["config_hash"] == small_config.hash()
    assert saved["provenance"]["frames_background"] == {"image": 198, "pupil": 198}


def test_classical_config_does_not_violate(classical_config):
    assert classical_config.source.uncertainty_product == pytest.approx(0.8)
    report = run_pipeline(classical_config)
    assert not report["epr"]["violated"]
    assert report["epr"]["product_hbar2"] > 0.25


def test_report_reproducible_across_runs_and_threads(small_config):
    config = replace(small_config, n_frames=40)
    a = run_pipeline(config, threads=1)
    b = run_pipeline(config, threads=8)
    assert json.dumps(reproducible_part(a), sort_keys=True) == json.dumps(reproducible_part(b), sort_keys=True)
    assert "timestamps" in a


def test_recorded_stacks_are_used(small_config, tmp_path):
    config = replace(small_config, n_frames=40)
    paths = {}
    for plane in ("image", "pupil"):
        stack, _ = acquire(config, plane)
        paths[plane] = str(write_stack(stack, tmp_path / f"{plane}.bphs"))
    loaded = run_pipeline(replace(config, stacks=StackPaths(**paths)))
    fresh = run_pipeline(config)
    assert loaded["epr"] == fresh["epr"]
    assert loaded["ground_truth"] == {}


def test_missing_stack_is_a_load_error(small_config, tmp_path):
    config = replace(small_config, stacks=StackPaths(image=str(tmp_path / "absent.bphs")))
    with pytest.raises(PipelineError) as info:
        run_pipeline(config)
    assert info.value.stage == "load"
    assert isinstance(info.value.cause, OSError)


def test_control_run_is_reported(small_config, tmp_path):
    config = replace(small_config, control=ControlConfig(eta=0.5))
    report = run_pipeline(config, tmp_path)
    control = report["control"]
    assert control["predicted_volume_ratio"] == pytest.approx(0.5)
    assert 0 < control["image"]["volume_ratio"] < 1
    main = read_pgm(tmp_path / "map_image.pgm")
    ctrl = read_pgm(tmp_path / "map_image_control.pgm")
    assert main.max() == 255 and ctrl.max() < 255


def test_predicted_volume_ratio_without_compensation(small_config):
    config = replace(small_config, control=ControlConfig(eta=0.5, pump_compensation=False))
    assert predicted_volume_ratio(config) == pytest.approx(0.25)


def test_sweep_rows_and_errors(small_config, tmp_path):
    config = replace(small_config, n_frames=40)
    rows = run_sweep(config, [12e-3, 4e-3, -1.0], tmp_path)
    assert [r["aperture_diameter_m"] for r in rows] == [12e-3, 4e-3, -1.0]
    assert rows[0]["error"] == "" and rows[1]["error"] == ""
    assert rows[2]["error"]
    assert rows[1]["sigma_x_px"] > rows[0]["sigma_x_px"]
    assert (tmp_path / "sweep.csv").read_text().count("\n") == 4
    with pytest.raises(ValueError):
        run_sweep(config, [12e-3])


def test_affine_fit():
    assert affine_fit([0, 1, 2], [1, 3, 5]) == pytest.approx((2.0, 1.0))


@pytest.fixture
def config_file(small_config, tmp_path):
    path = tmp_path / "exp.json"
    dump_config(replace(small_config, n_frames=60), path)
    return path


def test_cli_stage_chain(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    for plane in ("image", "pupil"):
        assert main(["simulate", "--config", str(config_file), "--plane", plane, "--out", str(out)]) == 0
        assert main(["correlate", str(out / f"stack_{plane}.bphs"), "--config", str(config_file), "--out", str(out)]) == 0
        assert main(["fit", str(out / f"map_{plane}.json"), "--config", str(config_file), "--out", str(out)]) == 0
    code = main(
        ["witness", str(out / "fit_image.json"), str(out / "fit_pupil.json"), "--config", str(config_file), "--out", str(out)]
    )
    assert code == 0
    assert "violated = True" in capsys.readouterr().out
    staged = json.loads((out / "witness.json").read_text())

    # the one-shot pipeline gives the same answer as the staged commands
    assert main(["pipeline", "--config", str(config_file), "--out", str(tmp_path / "all"), "--threads", "0"]) == 0
    report = json.loads((tmp_path / "all" / "report.json").read_text())
    assert report["epr"] == staged["epr"]

    assert main(["render", str(out / "map_image.json"), str(out / "map_pupil.json"), "--shared", "--out", str(tmp_path / "r")]) == 0
    assert read_pgm(tmp_path / "r" / "map_image.pgm").max() == 255


def test_cli_seed_override_changes_output(config_file, tmp_path):
    for seed in (1, 2):
        main(["simulate", "--config", str(config_file), "--seed", str(seed), "--out", str(tmp_path / str(seed))])
    a = (tmp_path / "1" / "stack_image.bphs").read_bytes()
    b = (tmp_path / "2" / "stack_image.bphs").read_bytes()
    assert a != b


def test_cli_exit_codes(config_file, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"camera": {"qe": 2}}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--config", str(config_file), "--threads", "-2"]) == 1
    assert main(["correlate", str(tmp_path / "absent.bphs"), "--out", str(tmp_path)]) == 2
    garbage = tmp_path / "garbage.bphs"
    garbage.write_bytes(b"nope" * 20)
    assert main(["correlate", str(garbage), "--out", str(tmp_path)]) == 2
    flat = CorrelationMap(np.zeros((63, 63)), MapKind.AUTOCORRELATION, Plane.IMAGE)
    save_map(flat, tmp_path / "flat.json")
    assert main(["fit", str(tmp_path / "flat.json"), "--config", str(config_file), "--out", str(tmp_path)]) == 3
    with pytest.raises(SystemExit):
        main(["nonsense"])
