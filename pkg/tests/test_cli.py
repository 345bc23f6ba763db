import json

import numpy as np
import pytest

from nsf_rom.checkpoint import parse_latents
from nsf_rom.cli import main
from nsf_rom.dataset import dataset_bytes, read_dataset

SCENE = """\
[scene]
name = "cube_drop"
frames = 6

[geometry]
size = [0.125, 0.125, 0.125]

[sweep]
train = [80.0, 120.0]
test = [100.0]

[train]
latent_dim = 6
g_width = 8
h_width = 8
l_width = 8
encoder_hidden = 8
hidden_layers = 2
epoch_scale = 0.01

[deploy]
samples = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene.toml"
    scene.write_text(SCENE)
    assert main(["generate", "--scene", str(scene), "--out-dir", str(root / "data")]) == 0
    assert main(["train", "--dataset-dir", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    return root


def test_generate_outputs(workspace):
    data = workspace / "data"
    man = json.loads((data / "manifest.json").read_text())
    assert [e["mu"] for e in man["train"]] == [80.0, 120.0]
    assert [e["mu"] for e in man["test"]] == [100.0]
    ds = read_dataset(data / man["train"][0]["file"])
    assert ds.n_frames == 6 and ds.mu == (80.0,)


def test_generate_is_deterministic(workspace, tmp_path):
    assert main(["generate", "--scene", str(workspace / "scene.toml"), "--out-dir", str(tmp_path)]) == 0
    for name in ("cube_drop_mu80.nsfd", "cube_drop_mu100.nsfd"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_simulate_matches_generate(workspace, tmp_path):
    out = tmp_path / "one.nsfd"
    assert main(["simulate", "--scene", str(workspace / "scene.toml"), "--mu", "100", "--out", str(out)]) == 0
    assert out.read_bytes() == (workspace / "data" / "cube_drop_mu100.nsfd").read_bytes()


def test_checkpoint_files(workspace):
    for name in ("g.nsf", "e.nsf", "h.nsf", "l.nsf", "scene.toml"):
        assert (workspace / "ckpt" / name).exists()
    assert (workspace / "ckpt" / "g.nsf").read_bytes()[:4] == b"NSF1"


def test_deploy_and_eval(workspace, tmp_path, capsys):
    out, lat = tmp_path / "r.nsfd", tmp_path / "r.lat"
    args = ["deploy", "--ckpt", str(workspace / "ckpt"), "--mu", "100", "--steps", "3", "--out", str(out), "--latents", str(lat)]
    assert main(args) == 0
    ds = read_dataset(out)
    assert ds.n_frames == 4 and ds.mu == (100.0,)
    idx, z = parse_latents(lat.read_bytes())
    assert z.shape == (4, 6) and list(idx) == [0, 1, 2, 3]
    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--truth", str(workspace / "data" / "cube_drop_mu100.nsfd")]) == 0
    delta = float(capsys.readouterr().out.strip().split("=")[1])
    assert np.isfinite(delta) and delta >= 0


def test_eval_identical(workspace, capsys):
    path = str(workspace / "data" / "cube_drop_mu100.nsfd")
    assert main(["eval", "--pred", path, "--truth", path]) == 0
    assert capsys.readouterr().out.strip() == "delta=0.000000e+00"


def test_deploy_refuses_too_few_samples(workspace, tmp_path, capsys):
    code = main(["deploy", "--ckpt", str(workspace / "ckpt"), "--mu", "100", "--samples", "1", "--out", str(tmp_path / "x.nsfd")])
    assert code == 1
    assert "ceil(r/3) = 2" in capsys.readouterr().err
    assert not (tmp_path / "x.nsfd").exists()


def test_train_stress_needs_deformation(workspace, tmp_path, capsys):
    code = main(["train", "--dataset-dir", str(workspace / "data"), "--field", "h", "--out", str(tmp_path / "empty")])
    assert code == 1
    assert "g.nsf" in capsys.readouterr().err


def test_train_single_field_reuses_deformation(workspace, tmp_path):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(workspace / "ckpt", ck)
    before = (ck / "g.nsf").read_bytes()
    assert main(["train", "--dataset-dir", str(workspace / "data"), "--field", "l", "--out", str(ck)]) == 0
    assert (ck / "g.nsf").read_bytes() == before
    assert (ck / "l.nsf").read_bytes() == (workspace / "ckpt" / "l.nsf").read_bytes()


def test_bench_oracle(workspace, tmp_path, capsys):
    kv = tmp_path / "b.kv"
    args = [
        "bench", "--oracle", str(workspace / "data" / "cube_drop_mu100.nsfd"), "--scene", str(workspace / "scene.toml"),
        "--samples", "3", "--steps", "4", "--trials", "2", "--kv", str(kv), "--report", str(tmp_path / "b.txt"),
    ]
    assert main(args) == 0
    values = dict(line.split("=", 1) for line in kv.read_text().splitlines())
    assert float(values["delta"]) < 1e-8
    assert int(values["trials"]) == 2
    assert "evaluation report" in (tmp_path / "b.txt").read_text()


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--bogus"])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_bad_input_file(tmp_path, capsys):
    bad = tmp_path / "bad.nsfd"
    bad.write_bytes(b"nope")
    assert main(["eval", "--pred", str(bad), "--truth", str(bad)]) == 1


def test_undefined_metric_is_numeric_failure(tmp_path, workspace):
    ds = read_dataset(workspace / "data" / "cube_drop_mu100.nsfd")
    ds.positions[:] = 0.0
    zero = tmp_path / "zero.nsfd"
    zero.write_bytes(dataset_bytes(ds))
    assert main(["eval", "--pred", str(zero), "--truth", str(zero)]) == 2


def test_out_of_range_parameter(tmp_path):
    scene = tmp_path / "sand.toml"
    scene.write_text('[scene]\nname = "sand_column"\nframes = 2\n')
    assert main(["simulate", "--scene", str(scene), "--mu", "60", "--out", str(tmp_path / "s.nsfd")]) == 1
