import csv
import json

import numpy as np
import pytest

from dynmri.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, read_kspace, write_kspace
from dynmri.config import RunConfig
from dynmri.data import generate_phantom, read_dataset, write_dataset
from dynmri.metrics import PSNR_CAP
from dynmri.sampling import mask_for_rate, measure, read_mask


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def tiny_config(path):
    RunConfig(noiseless=True, iters=4, atoms=16, n_groups=2, radius=3.0, burn_in=2).save(path)
    return str(path)


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["nosuch"]) == EXIT_USAGE
    assert main(["mask", "--side", "32"]) == EXIT_USAGE
    assert main(["mask", "--side", "32", "--rate", "0.2", "--rays", "3", "--out", "x"]) == EXIT_USAGE


def test_help_exits_ok(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "reconstruct" in capsys.readouterr().out


def test_mask_command(tmp_path):
    out = tmp_path / "m"
    assert main(["mask", "--side", "64", "--rate", "0.2", "--out", str(out)]) == EXIT_OK
    m = read_mask(out)
    assert np.array_equal(m.bits, mask_for_rate(64, 0.2).bits)
    assert main(["mask", "--side", "64", "--rate", "1.5", "--out", str(out)]) == EXIT_DATA


def test_phantom_and_sample(tmp_path):
    stem = tmp_path / "ph"
    assert main(["phantom", "--side", "16", "--frames", "3", "--out", str(stem)]) == EXIT_OK
    ds = read_dataset(stem)
    assert ds.data.shape == (3, 16, 16)
    assert np.array_equal(ds.data, generate_phantom(16, 3).data.astype(ds.data.dtype))
    ks = tmp_path / "k"
    assert main(["sample", "--dataset", str(stem), "--out", str(ks)]) == EXIT_OK
    files = sorted(ks.glob("frame_*.npz"))
    assert len(files) == 3
    y2 = read_kspace(files[1])
    assert y2.frame_index == 2
    assert y2.mask.rate == pytest.approx(mask_for_rate(16, 0.2).rate)


def test_kspace_file_round_trip(tmp_path, rng):
    y = measure(rng.random((16, 16)), mask_for_rate(16, 0.3), 0.01, rng, frame_index=4)
    write_kspace(y, tmp_path / "f.npz")
    z = read_kspace(tmp_path / "f.npz")
    assert np.array_equal(z.mask.bits, y.mask.bits)
    assert np.array_equal(z.values, y.values)
    assert (z.frame_index, z.noise_bound, z.mask.num_rays) == (4, y.noise_bound, y.mask.num_rays)


def test_missing_data_exit_code(tmp_path):
    assert main(["sample", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["reconstruct", "--kspace", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_groups": 0}))
    (tmp_path / "k").mkdir()
    assert main(["reconstruct", "--kspace", str(tmp_path / "k"), "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_reconstruct_and_evaluate(tmp_path):
    stem = tmp_path / "ph"
    main(["phantom", "--side", "32", "--frames", "2", "--out", str(stem)])
    main(["sample", "--dataset", str(stem), "--out", str(tmp_path / "k")])
    out = tmp_path / "r"
    code = main(["reconstruct", "--kspace", str(tmp_path / "k"), "--truth", str(stem),
                 "--config", tiny_config(tmp_path / "c.json"), "--out", str(out)])
    assert code == EXIT_OK
    for name in ("frame_0001.png", "frame_0002.png", "error_0002.png", "recon.json", "config.json"):
        assert (out / name).exists()
    diag = rows(out / "diagnostics.csv")
    assert [int(r["frame"]) for r in diag] == [1] * 4 + [2] * 4
    assert RunConfig.load(out / "config.json").iters == 4

    assert main(["evaluate", "--recon", str(out / "recon"), "--truth", str(stem),
                 "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    ev = rows(tmp_path / "e.csv")
    assert [int(r["frame"]) for r in ev] == [1, 2]
    assert all(float(r["psnr"]) > 10 and r["gini"] for r in ev)


def test_evaluate_identical_images_is_capped(tmp_path):
    stem = tmp_path / "ph"
    write_dataset(generate_phantom(16, 2), stem)
    assert main(["evaluate", "--recon", str(stem), "--truth", str(stem),
                 "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    assert [float(r["psnr"]) for r in rows(tmp_path / "e.csv")] == [PSNR_CAP, PSNR_CAP]
    other = tmp_path / "small"
    write_dataset(generate_phantom(8, 2), other)
    assert main(["evaluate", "--recon", str(other), "--truth", str(stem)]) == EXIT_DATA


def test_non_finite_kspace_is_data_error(tmp_path):
    y = measure(np.ones((16, 16)), mask_for_rate(16, 0.4), frame_index=1)
    y.values[0] = np.nan
    (tmp_path / "k").mkdir()
    write_kspace(y, tmp_path / "k" / "frame_0001.npz")
    code = main(["reconstruct", "--kspace", str(tmp_path / "k"), "--out", str(tmp_path / "o"),
                 "--config", tiny_config(tmp_path / "c.json")])
    assert code == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_code(tmp_path, monkeypatch, capsys):
    import dynmri.admm as admm

    def diverge(ctx, synth, weight, y, **kw):
        return np.full(synth.shape, np.inf, dtype=complex)

    monkeypatch.setattr(admm, "x_update_weighted", diverge)
    write_dataset(generate_phantom(16, 2), tmp_path / "ph")
    main(["sample", "--dataset", str(tmp_path / "ph"), "--out", str(tmp_path / "k")])
    code = main(["reconstruct", "--kspace", str(tmp_path / "k"), "--out", str(tmp_path / "o"),
                 "--config", tiny_config(tmp_path / "c.json")])
    assert code == EXIT_NUMERIC
    assert "non-finite iterate" in capsys.readouterr().err


def test_sweep_one_row_per_value(tmp_path):
    out = tmp_path / "s.csv"
    code = main(["sweep", "--param", "Ng", "--values", "1,2", "--side", "16", "--frames", "2",
                 "--config", tiny_config(tmp_path / "c.json"), "--out", str(out)])
    assert code == EXIT_OK
    got = rows(out)
    assert [int(float(r["value"])) for r in got] == [1, 2]
    assert all(float(r["iter_seconds_mean"]) > 0 for r in got)
    assert main(["sweep", "--param", "Ng", "--values", "a,b", "--side", "16"]) == EXIT_DATA
