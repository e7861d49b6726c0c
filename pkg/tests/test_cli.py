import csv
import json

import numpy as np
import pytest

from tumorsim.cli import cmd_generate, main, resolve_generate_config
from tumorsim.losses import Decomposition, LossTarget, LossWeights, total_loss
from tumorsim.volume import read_pgm, read_volume


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    assert main(["phantoms", "--out", str(root), "--count", "3", "--dims", "16,16,16", "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def generated(demo):
    out = demo / "gen"
    rc = main(["generate", "--pool", str(demo / "pool"), "--roi", str(demo / "roi.nii"),
               "--out", str(out), "--count", "3", "--preset", "liver", "--seed", "9"])
    assert rc == 0
    return out


def test_generate_layout(generated):
    manifest = json.loads((generated / "manifest.json").read_text())
    assert len(manifest["samples"]) == 3
    assert "workers" not in manifest["config"]
    for e in manifest["samples"]:
        sdir = generated / "samples" / e["id"]
        for name in ("x", "x_n", "s", "m"):
            assert (sdir / f"{name}.nii").exists()
        meta = json.loads((sdir / "sample.json").read_text())
        assert meta["alpha"] == e["alpha"]
        x = read_volume(sdir / "x.nii").data.astype(np.float64)
        xn = read_volume(sdir / "x_n.nii").data.astype(np.float64)
        s = read_volume(sdir / "s.nii").data.astype(np.float64)
        m = read_volume(sdir / "m.nii").data > 0.5
        again = ((1 - e["alpha"] * m) * xn + e["alpha"] * m * s).astype(np.float32)
        assert np.array_equal(again, read_volume(sdir / "x.nii").data)
        assert np.array_equal(x[~m], xn[~m])


def test_verify_ok_and_tampered(generated, tmp_path, capsys):
    assert main(["verify", "--manifest", str(generated)]) == 0
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(generated, copy)
    target = copy / "samples" / "000001" / "m.nii"
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 1
    target.write_bytes(bytes(raw))
    assert main(["verify", "--manifest", str(copy / "manifest.json")]) == 3
    target.unlink()
    assert main(["verify", "--manifest", str(copy)]) == 3
    assert "missing" in capsys.readouterr().err


def test_generate_workers_deterministic(demo, tmp_path):
    base = ["generate", "--pool", str(demo / "pool"), "--count", "4", "--seed", "5", "--preset", "brain"]
    assert main(base + ["--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--workers", "3"]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


@pytest.mark.parametrize("fmt", ["nii.gz", "raw"])
def test_generate_formats(demo, tmp_path, fmt):
    out = tmp_path / fmt
    assert main(["generate", "--pool", str(demo / "pool"), "--out", str(out), "--count", "1",
                 "--format", fmt]) == 0
    assert (out / "samples" / "000000" / f"x.{fmt}").exists()
    assert main(["verify", "--manifest", str(out)]) == 0


def test_config_file_and_flag_precedence(demo, tmp_path):
    cfg = {"pool": str(demo / "pool"), "out": str(tmp_path / "o"), "count": 2, "seed": 1,
           "preset": "liver", "overrides": {"k_range": [2, 2]}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    resolved = resolve_generate_config(str(tmp_path / "c.json"), count=1, seed=None)
    assert resolved["count"] == 1 and resolved["seed"] == 1
    manifest = cmd_generate(resolved)
    assert [e["k"] for e in manifest["samples"]] == [2]
    (tmp_path / "bad.json").write_text(json.dumps({"colour": "red"}))
    assert main(["generate", "--config", str(tmp_path / "bad.json")]) == 1


def test_normalize_mean(demo, tmp_path):
    out = tmp_path / "n"
    assert main(["generate", "--pool", str(demo / "pool"), "--out", str(out), "--normalize", "mean"]) == 0
    xn = read_volume(out / "samples" / "000000" / "x_n.nii").data
    assert xn.astype(np.float64).mean() == pytest.approx(1.0, rel=1e-5)


def test_exit_codes(demo, tmp_path):
    assert main(["generate", "--pool", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert main(["generate", "--pool", str(demo / "pool")]) == 1
    assert main(["generate", "--pool", str(demo / "pool"), "--out", str(tmp_path / "o"), "--count", "0"]) == 1
    assert main(["nonsense"]) == 1
    assert main(["losses", "--samples", "a", "--decomp", "b", "--out", "c", "--weights", "1,2"]) == 1
    (tmp_path / "broken.nii").write_bytes(b"\0" * 400)
    assert main(["render", "--volume", str(tmp_path / "broken.nii"), "--index", "0", "--window", "0,1",
                 "--out", str(tmp_path / "x.pgm")]) == 2


def test_decompose_losses_metrics_pipeline(generated, tmp_path):
    dec = tmp_path / "dec"
    assert main(["decompose", "--input", str(generated), "--out", str(dec), "--max-iter", "300"]) == 0
    for cid in ("000000", "000001", "000002"):
        for name in ("x_hat", "s_hat", "m_hat", "mask"):
            assert (dec / cid / f"{name}.nii").exists()
        trace = (dec / cid / "trace.jsonl").read_text().splitlines()
        assert json.loads(trace[0])["iteration"] == 0

    assert main(["losses", "--samples", str(generated), "--decomp", str(dec), "--out", str(tmp_path / "l")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "l" / "losses.csv")))
    assert len(rows) == 3
    for r in rows:
        terms = sum(float(r[k]) for k in ("l0", "l1", "l2", "l3"))
        assert float(r["total"]) == pytest.approx(terms, rel=1e-12)

    # weights 0,0,0,1 with unit alpha reproduce the real-data loss
    assert main(["losses", "--samples", str(generated), "--decomp", str(dec), "--out", str(tmp_path / "u"),
                 "--weights", "0,0,0,1", "--alpha-mode", "unit"]) == 0
    row = json.loads((tmp_path / "u" / "losses.jsonl").read_text().splitlines()[0])
    x = read_volume(generated / "samples" / "000000" / "x.nii").data
    d = Decomposition(*(read_volume(dec / "000000" / f"{n}.nii").data for n in ("x_hat", "s_hat", "m_hat")))
    real = total_loss(d, LossTarget.real(x), LossWeights(0, 0, 0, 1, alpha=1.0))
    assert row["total"] == pytest.approx(real.total, rel=1e-12)
    assert row["alpha"] == 1.0

    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for cid in ("000000", "000001", "000002"):
        (pred / f"{cid}.nii").write_bytes((dec / cid / "mask.nii").read_bytes())
        (gt / f"{cid}.nii").write_bytes((generated / "samples" / cid / "m.nii").read_bytes())
    assert main(["metrics", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "m")]) == 0
    lines = (tmp_path / "m" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "dice,sensitivity,specificity,hd95_mm"
    assert len(lines) == 4
    summary = json.loads((tmp_path / "m" / "summary.json").read_text())
    assert summary["cases"] == 3 and "mean" in summary["columns"]["dice"]
    (pred / "000002.nii").unlink()
    assert main(["metrics", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "m2")]) == 2


def test_decompose_rejects_zero_iterations(generated, tmp_path):
    assert main(["decompose", "--input", str(generated / "samples" / "000000"), "--out", str(tmp_path),
                 "--max-iter", "0"]) == 1


def test_decompose_real_mode_on_volume(generated, tmp_path):
    src = generated / "samples" / "000000" / "x.nii"
    assert main(["decompose", "--input", str(src), "--out", str(tmp_path / "r"), "--mode", "real",
                 "--max-iter", "5"]) == 0
    assert (tmp_path / "r" / "m_hat.nii").exists()
    assert main(["decompose", "--input", str(src), "--out", str(tmp_path / "s")]) == 1


def test_render_with_overlay(generated, tmp_path):
    sdir = generated / "samples" / "000000"
    m = read_volume(sdir / "m.nii").data > 0.5
    k = int(np.argmax(m.sum(axis=(0, 1))))
    out = tmp_path / "s.pgm"
    assert main(["render", "--volume", str(sdir / "x.nii"), "--mask", str(sdir / "m.nii"),
                 "--index", str(k), "--window", "0,10", "--out", str(out)]) == 0
    px = read_pgm(out)
    assert px.shape == (16, 16)
    plane = m[:, :, k].T
    assert np.all(px[plane & (px == 255)] == 255)
    assert (px == 255).sum() >= 1
    assert not np.any(px[~plane] == 255)
    assert main(["render", "--volume", str(sdir / "x.nii"), "--index", "99", "--window", "0,1",
                 "--out", str(out)]) == 1


def test_seed_and_spacing_flags(demo, tmp_path):
    base = ["generate", "--pool", str(demo / "pool"), "--out", str(tmp_path / "o")]
    assert main(base + ["--seed", "-1"]) == 1
    assert main(base + ["--seed", str(2 ** 64)]) == 1
    assert main(base + ["--seed", str(2 ** 64 - 1), "--spacing", "0.5,0.5,2"]) == 0
    assert read_volume(tmp_path / "o" / "samples" / "000000" / "x.nii").spacing == (0.5, 0.5, 2.0)
    assert main(base + ["--spacing", "1,2"]) == 1
