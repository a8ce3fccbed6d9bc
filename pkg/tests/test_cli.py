import json
from pathlib import Path

import numpy as np
import pytest

from urbanfill import cli, formats


def run(*argv) -> int:
    return cli.dispatch(["--threads", "1", *map(str, argv)])


def _pipeline(d: Path) -> dict:
    """Exercise every subcommand on a tiny grid; returns the produced paths."""
    d.mkdir(parents=True, exist_ok=True)
    p = {k: d / v for k, v in dict(
        series="city.ugb", train_series="train.ugb", blocks="blocks", mask="mask.ugb", region="region.txt",
        events="events.csv", raster="raster.ugb", ckpt="model.uckp", log="log.csv", imputed="imputed.ugb",
        metrics="metrics.csv", smask="smask.ugb", scen="scenario.txt", scen_out="scen.csv",
        scen_mean="scen_mean.csv", emap="emap.ugb", grad="grad.csv").items()}
    assert run("synth", "--days", 2, "--grid", 16, "--seed", 4, "--png", "-o", p["series"]) == 0
    assert run("synth", "--days", 1, "--grid", 16, "--seed", 5, "-o", p["train_series"]) == 0
    assert run("chunk", "--input", p["series"], "--t", 3, "-o", p["blocks"]) == 0
    block0 = p["blocks"] / "block_00000.ugb"
    assert run("mask", "--mode", "biased", "--input", block0, "--seed", 2, "-o", p["mask"]) == 0
    p["region"].write_text("lon_min=0\nlon_max=4\nlat_min=0\nlat_max=4\ngrid_w=4\ngrid_h=4\n")
    p["events"].write_text("timestamp,lon,lat\n2016-01-01T00:10:00,1.0,1.0\n2016-01-01T01:30:00,3.5,0.5\n"
                           "bad,row\n2016-01-01T00:20:00,9,9\n")
    assert run("rasterize", "--events", p["events"], "--region", p["region"], "--start", "2016-01-01T00:00:00",
               "--frames", 2, "-o", p["raster"]) == 0
    assert run("train", "--data", p["series"], "--t", 3, "--iters", 2, "--batch-size", 2, "--validate-every", 1,
               "--width-scale", "1/16", "--seed", 1, "-o", p["ckpt"], "--log", p["log"]) == 0
    assert run("impute", "--ckpt", p["ckpt"], "--input", block0, "--mask", p["mask"], "-o", p["imputed"]) == 0
    assert run("eval", "--pred", p["imputed"], "--gt", block0, "--mask", p["mask"], "--peak", 20,
               "-o", p["metrics"]) == 0
    sm = np.ones((1, 16, 16), np.uint8)
    sm[0, 5:9, 5:9] = 0
    formats.write_ugb(p["smask"], sm)
    p["scen"].write_text("name=core\nmask=smask.ugb\nstart=0\nend=12\n")
    assert run("scenario", "--ckpt", p["ckpt"], "--series", p["series"], "--scenario", p["scen"],
               "-o", p["scen_out"]) == 0
    assert run("scenario", "--baseline", "mean", "--train", p["train_series"], "--series", p["series"],
               "--scenario", p["scen"], "-o", p["scen_mean"]) == 0
    assert run("scenarios", "--grid", 16, "--end", 12, "-o", d / "scen_dir") == 0
    assert run("scenario", "--baseline", "nn2", "--series", p["series"], "--scenario", d / "scen_dir" / "core_avenue.txt",
               "-o", d / "scen_nn.csv") == 0
    assert run("errmap", "--preds", p["imputed"], "--gts", block0, "--masks", p["mask"], "-o", p["emap"]) == 0
    assert run("gradcheck", "--seed", 0, "-o", p["grad"]) == 0
    return p


@pytest.fixture(scope="module")
def twice(tmp_path_factory):
    a = _pipeline(tmp_path_factory.mktemp("a"))
    b = _pipeline(tmp_path_factory.mktemp("b"))
    return a, b


def _all_files(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p for p in sorted(root.rglob("*")) if p.is_file()}


def test_every_subcommand_writes_a_manifest(twice):
    a, _ = twice
    root = a["series"].parent
    subs = {json.loads(p.read_text())["subcommand"] for p in root.rglob("*.manifest.json")}
    assert subs == {"synth", "chunk", "mask", "rasterize", "train", "impute", "eval", "scenario", "errmap",
                    "gradcheck", "scenarios"}


def test_reruns_are_byte_identical(twice):
    a, b = twice
    fa, fb = _all_files(a["series"].parent), _all_files(b["series"].parent)
    assert fa.keys() == fb.keys()
    for name in fa:
        if name.endswith(".manifest.json"):
            ma, mb = json.loads(fa[name].read_text()), json.loads(fb[name].read_text())
            strip = lambda d: {Path(k).name: v for k, v in d.items()}
            assert strip(ma["outputs"]) == strip(mb["outputs"]), name
            assert strip(ma["inputs"]) == strip(mb["inputs"]), name
            assert ma["results"] == mb["results"], name
        else:
            assert fa[name].read_bytes() == fb[name].read_bytes(), name


def test_outputs_have_expected_shapes(twice):
    a, _ = twice
    assert formats.read_ugb(a["series"]).shape == (48, 16, 16)
    assert len(list(a["blocks"].glob("block_*.ugb"))) == 16
    assert formats.read_ugb(a["raster"]).sum() == 2
    man = json.loads(cli.manifest_path(a["raster"]).read_text())
    assert man["results"] == {"skipped": 1, "dropped": 1}
    assert a["series"].with_suffix(".png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    for png in ("log.val.png", "scen.png", "emap.png"):
        assert (a["series"].parent / png).exists()
    assert a["metrics"].read_text().startswith("block_index,l1_hole,l2_hole,ssim,psnr\n")
    assert len(a["scen_out"].read_text().splitlines()) == 13
    assert "passed" not in a["grad"].read_text().splitlines()[1]


def test_impute_keeps_observed_values(twice):
    a, _ = twice
    gt = formats.read_ugb(a["blocks"] / "block_00000.ugb")
    out = formats.read_ugb(a["imputed"])
    m = formats.read_ugb(a["mask"]).astype(bool)
    assert np.array_equal(out[m], gt[m])
    assert np.all(out >= 0)


def test_impute_all_valid_is_identity(twice, tmp_path):
    a, _ = twice
    block0 = a["blocks"] / "block_00000.ugb"
    ones = tmp_path / "ones.ugb"
    formats.write_ugb(ones, np.ones(formats.read_ugb(block0).shape, np.uint8))
    assert run("impute", "--ckpt", a["ckpt"], "--input", block0, "--mask", ones, "-o", tmp_path / "o.ugb") == 0
    assert np.array_equal(formats.read_ugb(tmp_path / "o.ugb"), formats.read_ugb(block0))


def test_train_resume_matches(twice, tmp_path):
    a, _ = twice
    full_ckpt, full_log = tmp_path / "f.uckp", tmp_path / "f.csv"
    assert run("train", "--data", a["series"], "--t", 3, "--iters", 4, "--batch-size", 2, "--validate-every", 2,
               "--width-scale", "1/16", "-o", full_ckpt, "--log", full_log) == 0
    ck, lg = tmp_path / "r.uckp", tmp_path / "r.csv"
    assert run("train", "--data", a["series"], "--t", 3, "--iters", 2, "--batch-size", 2, "--validate-every", 2,
               "--width-scale", "1/16", "-o", ck, "--log", lg) == 0
    assert run("train", "--data", a["series"], "--t", 3, "--iters", 4, "--batch-size", 2, "--validate-every", 2,
               "--width-scale", "1/16", "--resume", "-o", ck, "--log", lg) == 0
    assert ck.read_bytes() == full_ckpt.read_bytes()
    assert lg.read_text() == full_log.read_text()


def test_exit_codes(twice, tmp_path, capsys):
    a, _ = twice
    assert run("nonsense") == 1
    assert run("synth", "-o", tmp_path / "x.ugb") == 1                       # --days missing
    assert run("eval", "--pred", tmp_path / "missing.ugb", "--gt", a["series"], "--mask", a["mask"],
               "-o", tmp_path / "m.csv") == 2
    bad = tmp_path / "bad.ugb"
    bad.write_bytes(b"not a grid")
    assert run("chunk", "--input", bad, "--t", 3, "-o", tmp_path / "c") == 2
    assert run("chunk", "--input", a["series"], "--t", 0, "-o", tmp_path / "c") == 2
    assert run("scenario", "--series", a["series"], "--scenario", a["scen"], "-o", tmp_path / "s.csv") == 1
    assert run("eval", "--pred", a["imputed"], "--gt", a["series"], "--mask", a["mask"],
               "-o", tmp_path / "m.csv") == 2
    err = capsys.readouterr().err
    assert "ShapeError" in err


def test_main_exits_with_code(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        cli.main(["--threads", "1", "gradcheck"])
    assert exc.value.code == 0
    assert (tmp_path / "urbanfill-gradcheck.manifest.json").exists()
