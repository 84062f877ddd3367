import csv
import json
import math

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from layersplit import ShapeError, UndefinedAlphaError
from layersplit.evaluation import (
    EvalReport,
    evaluate,
    exceed_fraction,
    fit_alpha,
    load_eval_dir,
    psnr,
    score_image,
    ssim,
    ssim_map,
    ssim_r,
    ssim_rs,
)
from layersplit.imageio import write_image
from layersplit.model import build_network, save_checkpoint


def rand_img(seed, shape=(32, 32, 3)):
    return np.random.default_rng(seed).uniform(size=shape)


def sk_ssim_full(a, b):
    _, full = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0,
                                    channel_axis=2, full=True)
    return full


def test_ssim_identity():
    a = rand_img(0)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(ssim_map(a, a), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_ssim_map_matches_skimage(seed):
    a = rand_img(seed)
    b = np.clip(a + 0.2 * rand_img(seed + 10) - 0.1, 0, 1)
    ours = ssim_map(a, b)
    np.testing.assert_allclose(ours, sk_ssim_full(a, b), atol=1e-6)
    # skimage's scalar drops a 5 pixel border before averaging
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0, channel_axis=2)
    assert ours[5:-5, 5:-5].mean() == pytest.approx(ref, abs=1e-6)


def test_ssim_symmetric_and_bounded():
    a, b = rand_img(1), rand_img(2)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    m = ssim_map(a, b)
    assert m.max() <= 1 + 1e-12 and m.min() >= -1 - 1e-12


def test_ssim_rejects_small_and_mismatched():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


def test_ssim_r_full_mask_equals_ssim():
    a, b = rand_img(3), rand_img(4)
    assert ssim_r(a, b, np.ones((32, 32), bool)) == pytest.approx(ssim(a, b), abs=1e-12)


def test_ssim_r_is_area_weighted():
    a, b = rand_img(5), rand_img(6)
    m1 = np.zeros((32, 32), bool)
    m1[:, :10] = True
    m2 = ~m1
    whole = ssim_r(a, b, m1 | m2)
    parts = (m1.sum() * ssim_r(a, b, m1) + m2.sum() * ssim_r(a, b, m2)) / (m1.sum() + m2.sum())
    assert whole == pytest.approx(parts, abs=1e-12)


def test_ssim_r_empty_mask():
    with pytest.raises(ValueError):
        ssim_r(rand_img(0), rand_img(1), np.zeros((32, 32)))


def test_fit_alpha_recovers_scale():
    b = rand_img(7)
    np.testing.assert_allclose(fit_alpha(b * np.array([1, 2, 4]), b), [1, 2, 4], rtol=1e-12)


def test_fit_alpha_is_least_squares_minimum():
    b, bh = rand_img(8), rand_img(9)
    alpha = fit_alpha(b, bh)
    for c in range(3):
        err = lambda a: np.sum((b[..., c] - a * bh[..., c]) ** 2)
        for d in (-1e-3, 1e-3):
            assert err(alpha[c]) <= err(alpha[c] + d)


def test_fit_alpha_undefined():
    bh = rand_img(10)
    bh[..., 1] = 0
    with pytest.raises(UndefinedAlphaError):
        fit_alpha(rand_img(11), bh)


def test_ssim_rs_invariant_to_prediction_scale():
    b, bh = rand_img(12), rand_img(13)
    mask = np.ones((32, 32))
    assert ssim_rs(b, bh, mask) == pytest.approx(ssim_rs(b, 0.5 * bh, mask), abs=1e-10)
    assert ssim_rs(b, b * 0.3, mask) == pytest.approx(1.0, abs=1e-12)


def test_psnr_closed_forms():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 1.0) == pytest.approx(0.0)
    b = rand_img(14)
    c = np.clip(b + 0.05 * rand_img(15), 0, 1)
    assert psnr(b, c) == pytest.approx(peak_signal_noise_ratio(b, c, data_range=1.0))


def test_exceed_fraction():
    b = np.array([[0.1, 0.5], [0.9, 0.2]])
    i = np.array([[0.2, 0.5], [0.3, 0.1]])
    assert exceed_fraction(b, i) == 0.5


def test_score_image_and_report_files(tmp_path):
    b = rand_img(16)
    rows = [score_image("same", b, b, np.ones((32, 32))), score_image("zero", b, np.zeros_like(b))]
    assert rows[0]["psnr"] == math.inf and rows[1]["alpha"] is None and rows[1]["ssim_r"] is None
    report = EvalReport(rows, {"k": 1})
    report.write_json(tmp_path / "r.json")
    report.write_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["rows"][0]["psnr"] == "inf"
    with open(tmp_path / "r.csv") as fh:
        lines = list(csv.DictReader(fh))
    assert [r["id"] for r in lines] == ["same", "zero"]


def test_evaluate_checkpoint_on_directory(tmp_path):
    rng = np.random.default_rng(0)
    for k in range(2):
        write_image(tmp_path / "data" / f"{k}_i1.png", rng.uniform(size=(16, 16, 3)))
        write_image(tmp_path / "data" / f"{k}_b.png", rng.uniform(size=(16, 16, 3)))
    write_image(tmp_path / "data" / "1_mask.png", np.ones((16, 16)))
    rows = load_eval_dir(tmp_path / "data")
    assert [r[0] for r in rows] == ["0", "1"] and rows[0][3] is None and rows[1][3].all()
    ck = save_checkpoint(build_network(), tmp_path / "m.pt")
    report = evaluate(ck, rows)
    assert len(report.rows) == 2
    assert report.rows[0]["ssim_r"] is None and report.rows[1]["ssim_r"] is not None
    assert set(report.aggregates) == {"psnr", "ssim", "ssim_r", "ssim_rs"}


def test_evaluate_errors(tmp_path):
    with pytest.raises(ValueError):
        evaluate(build_network(), [])
    with pytest.raises(FileNotFoundError):
        load_eval_dir(tmp_path)


def test_exceed_fraction_extremes():
    b = rand_img(20)
    assert exceed_fraction(b, b) == 0.0
    assert exceed_fraction(np.ones((4, 4, 3)), np.zeros((4, 4, 3))) == 1.0


def test_ssim_rs_not_below_ssim_r_for_darkened_copy():
    b = rand_img(21)
    mask = np.zeros((32, 32), bool)
    mask[8:24, 8:24] = True
    dark = 0.6 * b
    assert ssim_rs(b, dark, mask) >= ssim_r(b, dark, mask)


def test_report_aggregates_are_row_means():
    rows = [score_image(str(k), rand_img(30 + k), rand_img(40 + k), np.ones((32, 32)))
            for k in range(3)]
    agg = EvalReport(rows).aggregates
    for key in ("psnr", "ssim", "ssim_r", "ssim_rs"):
        assert agg[key] == pytest.approx(np.mean([r[key] for r in rows]))
