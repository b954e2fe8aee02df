import json

import numpy as np
import pytest
import scipy.fft as sfft

from ncstomo.__main__ import build_parser, main
from ncstomo.errors import DataError, DivergenceError, MetricError, NcsError, UsageError
from ncstomo.fileio import read_image, read_mask, read_record, read_sinogram, write_image, write_sinogram, write_sparse
from ncstomo.ops import CirculantMap, SparseMap, default_detectors, radon_operator, to_dense
from ncstomo.phantom import Ellipse, PhantomSpec, make_phantom


@pytest.fixture
def phantom16(tmp_path):
    path = tmp_path / "phantom.raw"
    assert main(["phantom", "--size", "16", "--out", str(path)]) == 0
    return path


@pytest.fixture
def sino16(tmp_path, phantom16):
    path = tmp_path / "sino.raw"
    args = ["simulate", "--in", str(phantom16), "--angles", "10", "--noise", "gaussian:0.01", "--seed", "2", "--out", str(path)]
    assert main(args) == 0
    return path


def test_phantom_command(tmp_path, phantom16):
    img, header = read_image(phantom16)
    assert img.shape == (16, 16)
    np.testing.assert_array_equal(img, make_phantom(PhantomSpec(16)))
    manifest = json.loads((tmp_path / "phantom.raw.manifest.json").read_text())
    assert manifest["subcommand"] == "phantom"
    assert manifest["argv"][:3] == ["phantom", "--size", "16"]


def test_phantom_custom_spec_and_pgm(tmp_path):
    spec = PhantomSpec(12, [Ellipse((0.1, -0.2), (0.3, 0.5), 30.0, 1.5)])
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec.to_dict()))
    out = tmp_path / "custom.raw"
    assert main(["phantom", "--size", "12", "--spec", str(spec_path), "--out", str(out), "--pgm", str(tmp_path / "p.pgm")]) == 0
    img, _ = read_image(out)
    np.testing.assert_array_equal(img, make_phantom(spec))
    assert (tmp_path / "p.pgm").read_bytes().startswith(b"P5\n12 12\n255\n")


def test_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["phantom", "--size", "16"])
    assert exc.value.code == 2


def test_simulate_parallel(tmp_path, phantom16, sino16):
    sino, header = read_sinogram(sino16)
    assert sino.shape == (10, default_detectors(16))
    assert header["geometry"]["kind"] == "parallel"
    assert header["noise"]["sigma"] == 0.01

    exact = tmp_path / "exact.raw"
    assert main(["simulate", "--in", str(phantom16), "--angles", "10", "--noise", "gaussian:0", "--out", str(exact)]) == 0
    clean, _ = read_sinogram(exact)
    np.testing.assert_array_equal(clean, radon_operator(16, 10).forward(make_phantom(PhantomSpec(16))))


def test_simulate_poisson_rejects_negative_image(tmp_path):
    img = tmp_path / "neg.raw"
    write_image(img, -np.ones((8, 8)))
    code = main(["simulate", "--in", str(img), "--noise", "poisson:10", "--out", str(tmp_path / "s.raw")])
    assert code == 3


def test_simulate_bad_geometry_is_data_error(tmp_path, phantom16):
    code = main(["simulate", "--in", str(phantom16), "--detectors", "12", "--out", str(tmp_path / "s.raw")])
    assert code == 3


def test_reconstruct_zero_iterations_returns_initialization(tmp_path, sino16):
    out, log = tmp_path / "x.raw", tmp_path / "x.csv"
    assert main(["reconstruct", "--sino", str(sino16), "--iters", "0", "--out", str(out), "--log", str(log)]) == 0
    img, _ = read_image(out)
    assert img.shape == (16, 16) and not np.any(img)
    assert len(read_record(log)) == 0


@pytest.mark.parametrize("solver", ["ncs", "pdhg", "admm"])
def test_reconstruct_runs_each_solver(tmp_path, sino16, solver):
    out, log = tmp_path / f"{solver}.raw", tmp_path / f"{solver}.csv"
    args = ["reconstruct", "--sino", str(sino16), "--solver", solver, "--iters", "20", "--record-every", "5",
            "--out", str(out), "--log", str(log)]
    assert main(args) == 0
    record = read_record(log)
    step = 10 if solver == "admm" else 1
    assert record.iters == [5 * step, 10 * step, 15 * step, 20 * step]
    img, header = read_image(out)
    assert np.all(np.isfinite(img))
    assert header["solver"] == solver


def test_reconstruct_divergence_exit_code(tmp_path, sino16):
    args = ["reconstruct", "--sino", str(sino16), "--solver", "pdhg", "--alpha", "1", "--gamma", "1e-9",
            "--iters", "500", "--out", str(tmp_path / "x.raw"), "--log", str(tmp_path / "x.csv")]
    with np.errstate(all="ignore"):
        assert main(args) == 4


def test_reconstruct_bad_parameters(tmp_path, sino16):
    args = ["reconstruct", "--sino", str(sino16), "--alpha", "-1", "--out", str(tmp_path / "x.raw"), "--log", str(tmp_path / "x.csv")]
    assert main(args) == 2


def test_reconstruct_negative_dc_is_usage_error(tmp_path, sino16):
    args = ["reconstruct", "--sino", str(sino16), "--dc", "-1", "--iters", "5", "--out", str(tmp_path / "x.raw"),
            "--log", str(tmp_path / "x.csv")]
    assert main(args) == 2


def test_reconstruct_pet_with_negative_counts_is_data_error(tmp_path, sino16):
    sino, header = read_sinogram(sino16)
    sino[0, 0] = -1.0
    bad = write_sinogram(tmp_path / "neg.raw", sino, header["geometry"], header["noise"], {"N": 16})
    args = ["reconstruct", "--sino", str(bad), "--model", "pet", "--iters", "5", "--out", str(tmp_path / "x.raw"),
            "--log", str(tmp_path / "x.csv")]
    assert main(args) == 3


def test_reconstruct_refuses_non_dominating_metric(tmp_path, sino16):
    args = ["reconstruct", "--sino", str(sino16), "--solver", "ncs", "--gamma", "1e-9", "--dc", "0", "--iters", "5",
            "--out", str(tmp_path / "x.raw"), "--log", str(tmp_path / "x.csv")]
    assert main(args) == 4
    assert not (tmp_path / "x.raw").exists()


def test_estimate_mask_and_reconstruct_with_it(tmp_path, sino16):
    mask_path = tmp_path / "mask.raw"
    assert main(["estimate-mask", "--operator", "parallel", "--size", "16", "--angles", "10", "--samples", "3",
                 "--out", str(mask_path)]) == 0
    mask = read_mask(mask_path)
    assert mask.values.shape == (16, 16)
    diagnostics = json.loads((tmp_path / "mask.raw.diagnostics.json").read_text())
    assert diagnostics["samples"] == 3 and "C_R" in diagnostics

    out, log = tmp_path / "x.raw", tmp_path / "x.csv"
    args = ["reconstruct", "--sino", str(sino16), "--mask", str(mask_path), "--iters", "5", "--out", str(out), "--log", str(log)]
    assert main(args) == 0


def test_estimate_mask_recovers_circulant_operator(tmp_path, rng):
    h = sfft.fft2(rng.standard_normal((8, 8)))
    op = SparseMap(to_dense(CirculantMap(h)), (8, 8), (8, 8))
    matrix = write_sparse(tmp_path / "C.coo", op)
    out = tmp_path / "mask.raw"
    assert main(["estimate-mask", "--operator", "file", "--matrix", str(matrix), "--samples", "1", "--out", str(out)]) == 0
    np.testing.assert_allclose(read_mask(out).values, np.abs(h) ** 2, atol=1e-8 * np.abs(h).max() ** 2)


def test_estimate_mask_zero_samples_is_usage_error(tmp_path):
    assert main(["estimate-mask", "--operator", "parallel", "--size", "8", "--samples", "0", "--out", str(tmp_path / "m.raw")]) == 2


def test_rerun_reproduces_outputs(tmp_path, sino16):
    out, log = tmp_path / "x.raw", tmp_path / "x.csv"
    assert main(["reconstruct", "--sino", str(sino16), "--iters", "15", "--out", str(out), "--log", str(log)]) == 0
    first_img = out.read_bytes()
    first_log = [line.rsplit(",", 1)[0] for line in log.read_text().splitlines()]
    out.unlink()
    assert main(["rerun", str(tmp_path / "x.raw.manifest.json")]) == 0
    assert out.read_bytes() == first_img
    assert [line.rsplit(",", 1)[0] for line in log.read_text().splitlines()] == first_log


def test_rerun_returns_the_replayed_exit_code(tmp_path, sino16):
    out, log = tmp_path / "x.raw", tmp_path / "x.csv"
    assert main(["reconstruct", "--sino", str(sino16), "--iters", "3", "--out", str(out), "--log", str(log)]) == 0
    sino16.unlink()
    assert main(["rerun", str(tmp_path / "x.raw.manifest.json")]) == 3


def test_rerun_missing_manifest_is_data_error(tmp_path):
    assert main(["rerun", str(tmp_path / "nope.json")]) == 3


def test_error_families_carry_the_exit_codes():
    assert not hasattr(NcsError, "exit_code")
    assert (UsageError.exit_code, DataError.exit_code) == (2, 3)
    assert DivergenceError.exit_code == MetricError.exit_code == 4
