import csv
import io

import numpy as np
import pytest

from rfstream.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, main, parse_fields
from rfstream.errors import SpecError
from rfstream.geometry import FieldSpec
from rfstream.netgraph import GraphBuilder, save_graph
from rfstream.rfraw import load_array, save_array


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def models(tmp_path, capsys):
    paths = {}
    for name in ("identity", "fcn80", "conv-pool-conv", "m3"):
        paths[name] = tmp_path / f"{name}.json"
        assert run(capsys, "mock-model", name, "--output", paths[name])[0] == EXIT_OK
    return paths


def test_identity_serve_copies_input(tmp_path, rng, models, capsys):
    data = rng.random((30, 25, 4), dtype=np.float32)
    save_array(tmp_path / "in.rfraw", data)
    code, out, _ = run(capsys, "serve", "--input", f"input={tmp_path / 'in.rfraw'}", "--model", models["identity"],
                       "--split", "tiled:8x8", "--output", tmp_path / "out.rfraw")
    assert code == EXIT_OK and "wrote" in out
    assert (tmp_path / "out.rfraw").read_bytes() == (tmp_path / "in.rfraw").read_bytes()


def test_striped_serve_matches_whole(tmp_path, models, capsys):
    assert run(capsys, "random-raster", "--rows", 200, "--cols", 180, "--channels", 4,
               "--output", tmp_path / "in.rfraw")[0] == EXIT_OK
    outs = []
    for split in ("whole", "striped:16"):
        out = tmp_path / f"{split.replace(':', '_')}.rfraw"
        code, _, err = run(capsys, "serve", "--input", tmp_path / "in.rfraw", "--model", models["fcn80"],
                           "--split", split, "--output", out)
        assert code == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert "region 1/" in err


def test_serve_progress_is_quiet(tmp_path, models, capsys):
    save_array(tmp_path / "in.rfraw", np.zeros((4, 4, 4), np.float32))
    _, _, err = run(capsys, "serve", "--input", tmp_path / "in.rfraw", "--model", models["identity"],
                    "--output", tmp_path / "o.rfraw", "--quiet")
    assert err == ""


def test_serve_missing_model(tmp_path, capsys):
    save_array(tmp_path / "in.rfraw", np.zeros((4, 4, 1), np.float32))
    missing = tmp_path / "nope.json"
    code, _, err = run(capsys, "serve", "--input", tmp_path / "in.rfraw", "--model", missing,
                       "--output", tmp_path / "o.rfraw")
    assert code == EXIT_USAGE and str(missing) in err


def test_serve_missing_input(tmp_path, models, capsys):
    code, _, err = run(capsys, "serve", "--input", tmp_path / "gone.rfraw", "--model", models["identity"],
                       "--output", tmp_path / "o.rfraw")
    assert code == EXIT_USAGE and "gone.rfraw" in err


def test_serve_wrong_declared_fields(tmp_path, models, capsys):
    save_array(tmp_path / "in.rfraw", np.zeros((100, 100, 4), np.float32))
    code, _, err = run(capsys, "serve", "--input", tmp_path / "in.rfraw", "--model", models["fcn80"],
                       "--fields", "rf=80x80,ef=8x8,sf=1", "--output", tmp_path / "o.rfraw")
    assert code == EXIT_INVALID and "fields" in err
    assert not (tmp_path / "o.rfraw").exists()


def test_serve_patch_mode_matches_fullconv(tmp_path, models, capsys):
    run(capsys, "random-raster", "--rows", 120, "--cols", 100, "--channels", 4, "--seed", 3,
        "--output", tmp_path / "in.rfraw")
    for mode in ("patch", "fullconv"):
        assert run(capsys, "serve", "--input", tmp_path / "in.rfraw", "--model", models["fcn80"],
                   "--mode", mode, "--batch", 4, "--output", tmp_path / f"{mode}.rfraw")[0] == EXIT_OK
    a, b = load_array(tmp_path / "patch.rfraw"), load_array(tmp_path / "fullconv.rfraw")
    assert np.allclose(a, b, atol=1e-5, rtol=0)


def test_serve_two_inputs(tmp_path, models, capsys):
    run(capsys, "random-raster", "--rows", 40, "--cols", 30, "--channels", 6,
        "--geo", 5, 395, 10, -10, "--output", tmp_path / "ts.rfraw")
    run(capsys, "random-raster", "--rows", 200, "--cols", 150, "--channels", 4,
        "--geo", 1, 399, 2, -2, "--output", tmp_path / "vhrs.rfraw")
    code, out, err = run(capsys, "serve", "--input", f"ts={tmp_path / 'ts.rfraw'}",
                         "--input", f"vhrs={tmp_path / 'vhrs.rfraw'}", "--model", models["m3"],
                         "--fields", "rf.ts=1x1,rf.vhrs=25x25,ef=1x1,sf=1,ref=ts", "--mode", "patch",
                         "--split", "striped:5", "--output", tmp_path / "o.rfraw")
    assert code == EXIT_OK, err
    assert load_array(tmp_path / "o.rfraw").shape == (36, 26, 8)


def test_serve_bad_split(tmp_path, models, capsys):
    save_array(tmp_path / "in.rfraw", np.zeros((4, 4, 4), np.float32))
    code, _, _ = run(capsys, "serve", "--input", tmp_path / "in.rfraw", "--model", models["identity"],
                     "--split", "diagonal", "--output", tmp_path / "o.rfraw")
    assert code == EXIT_USAGE


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["serve", "--bogus"])
    assert exc.value.code == EXIT_USAGE


# ---------------------------------------------------------------- sample


@pytest.fixture
def image100(tmp_path, capsys):
    path = tmp_path / "img.rfraw"
    run(capsys, "random-raster", "--rows", 100, "--cols", 100, "--channels", 3, "--dtype", "u16", "--output", path)
    return path


def test_sample_grid(tmp_path, image100, capsys):
    code, out, _ = run(capsys, "sample", "--input", image100, "--patch", "5x5", "--strategy", "grid:10",
                       "--output", tmp_path / "p.rfraw")
    assert code == EXIT_OK and "100 patches" in out
    assert load_array(tmp_path / "p.rfraw").shape == (500, 5, 3)


def test_sample_seed_is_deterministic(tmp_path, image100, capsys):
    for name in ("a", "b"):
        run(capsys, "sample", "--input", image100, "--patch", "7x7", "--strategy", "random:12", "--seed", 7,
            "--output", tmp_path / f"{name}.rfraw")
    assert (tmp_path / "a.rfraw").read_bytes() == (tmp_path / "b.rfraw").read_bytes()


def test_sample_patch_too_large(tmp_path, image100, capsys):
    code, _, err = run(capsys, "sample", "--input", image100, "--patch", "101x5", "--output", tmp_path / "p.rfraw")
    assert code == EXIT_USAGE and "larger" in err


def test_sample_with_labels(tmp_path, image100, capsys):
    (tmp_path / "pos.txt").write_text("10 10 3\n50 60 9\n")
    code, _, _ = run(capsys, "sample", "--input", image100, "--patch", "5", "--strategy", f"file:{tmp_path / 'pos.txt'}",
                     "--output", tmp_path / "p.rfraw", "--labels-output", tmp_path / "l.rfraw")
    assert code == EXIT_OK
    assert load_array(tmp_path / "l.rfraw").ravel().tolist() == [3, 9]
    img = load_array(image100)
    assert np.array_equal(load_array(tmp_path / "p.rfraw")[5:], img[58:63, 48:53])


def test_sample_position_outside(tmp_path, image100, capsys):
    (tmp_path / "pos.txt").write_text("0 0\n")
    code, _, err = run(capsys, "sample", "--input", image100, "--patch", "5x5",
                       "--strategy", f"file:{tmp_path / 'pos.txt'}", "--output", tmp_path / "p.rfraw")
    assert code == EXIT_USAGE and "#0 (0, 0)" in err


def test_sample_zero_positions(tmp_path, image100, capsys):
    code, _, _ = run(capsys, "sample", "--input", image100, "--patch", "5x5", "--strategy", "random:0",
                     "--output", tmp_path / "p.rfraw")
    assert code == EXIT_USAGE and not (tmp_path / "p.rfraw").exists()


# ---------------------------------------------------------------- derive-fields


def test_derive_conv_pool_conv(models, capsys):
    code, out, _ = run(capsys, "derive-fields", "--model", models["conv-pool-conv"])
    assert code == EXIT_OK and "r=8x8 e=1x1 f=2x2" in out


def test_derive_identity(models, capsys):
    code, out, _ = run(capsys, "derive-fields", "--model", models["identity"])
    assert code == EXIT_OK and "r=1x1 e=1x1 f=1x1" in out


def test_derive_fcn80(models, capsys):
    code, out, _ = run(capsys, "derive-fields", "--model", models["fcn80"])
    assert code == EXIT_OK and "r=80x80 e=16x16 f=1x1" in out


def test_derive_same_padding_fails(tmp_path, capsys):
    b = GraphBuilder()
    x = b.input("input", 2)
    b.output("output", b.conv(x, 2, 3, padding="same"))
    save_graph(b.build(), tmp_path / "same.json")
    code, out, _ = run(capsys, "derive-fields", "--model", tmp_path / "same.json")
    assert code == EXIT_INVALID and "FAIL" in out


def test_derive_validates_declared(models, capsys):
    code, out, _ = run(capsys, "derive-fields", "--model", models["fcn80"], "--fields", "rf=80x80,ef=16x16,sf=1")
    assert code == EXIT_OK
    code, out, _ = run(capsys, "derive-fields", "--model", models["fcn80"], "--fields", "rf=64x64,ef=16x16,sf=1")
    assert code == EXIT_INVALID


# ---------------------------------------------------------------- benchmark


def test_benchmark_single_size(tmp_path, capsys):
    code, out, _ = run(capsys, "benchmark", "--sizes", "64", "--strategies", "whole,striped:16",
                       "--repeats", 1, "--output", tmp_path / "b.csv")
    assert code == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "b.csv").open()))
    assert list(rows[0]) == ["pixels", "strategy", "stripe", "seconds", "peak_bytes"]
    assert {r["strategy"] for r in rows} == {"whole", "striped:16"}
    assert {r["pixels"] for r in rows} == {str(64 * 64)}
    assert "R2 whole: n/a" in out and "R2 striped:16: n/a" in out


def test_benchmark_csv_on_stdout(capsys):
    code, out, err = run(capsys, "benchmark", "--sizes", "32,64", "--strategies", "whole", "--repeats", 1)
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [int(r["pixels"]) for r in rows] == [32 * 32, 64 * 64]
    assert "R2 whole:" in err


# ---------------------------------------------------------------- field parsing


def test_parse_fields_single():
    assert parse_fields("rf=80x80,ef=16x16,sf=1") == FieldSpec.single(80, 16)


def test_parse_fields_rational():
    spec = parse_fields("rf=4x4,ef=2x2,sf=1/2")
    assert spec.step == (1, 1)


def test_parse_fields_auto():
    assert parse_fields("auto") is None


def test_parse_fields_rejects_fractional_step():
    with pytest.raises(SpecError):
        parse_fields("rf=4,ef=3,sf=1/2")
