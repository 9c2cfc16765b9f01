import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coarsesort.cube import (
    N_CHANNELS,
    BandSpec,
    ExposureConfig,
    InvalidInputError,
    RawCapture,
    adapt_exposure,
    assemble_cube,
    bilinear_sample,
    canonical_band_table,
    canonical_channel_meta,
    channels_for_camera,
    crop_and_rescale,
    format_band_table,
    load_raw_capture,
    merge_brackets,
    normalize_image,
    read_cube,
    write_cube,
)


def test_band_table_entries():
    table = canonical_band_table()
    assert len(table) == 13
    assert table[0].camera == "UV" and table[0].passbands_nm == ((190.0, 1100.0),)
    assert table[0].exposure_s == 0.3 and table[0].channel_count == 1
    assert table[2].passbands_nm == ((375.0, 425.0), (745.0, 970.0)) and table[2].exposure_s == 1.0
    assert table[3].camera == "VISNIR" and table[3].channel_count == 3 and table[3].exposure_s == 0.01
    assert sum(b.channel_count for b in table) == N_CHANNELS


def test_band_table_invariants():
    table = canonical_band_table()
    assert len({b.filter_index for b in table}) == 13
    assert [b.filter_index for b in table if b.channel_count == 3] == [3]
    for b in table:
        for lo, hi in b.passbands_nm:
            assert 190 <= lo < hi <= 1700


def test_bandspec_rejects_bad_values():
    with pytest.raises(InvalidInputError):
        BandSpec(0, "IR", ((400, 500),), 0.1)
    with pytest.raises(InvalidInputError):
        BandSpec(0, "UV", ((500, 400),), 0.1)
    with pytest.raises(InvalidInputError):
        BandSpec(0, "UV", ((400, 500),), 0.1, channel_count=2)


def test_channel_layout():
    meta = canonical_channel_meta()
    assert len(meta) == 15
    assert [m.rgb_component for m in meta[3:6]] == ["R", "G", "B"]
    assert channels_for_camera("SWIR") == [10, 11, 12, 13, 14]
    assert channels_for_camera("UV", include_unfiltered=False) == [1, 2]
    assert format_band_table().splitlines()[-1] == "channels total: 15"


def test_normalize_examples():
    assert np.all(normalize_image(np.full((4, 4), 3.0)) == 0)
    np.testing.assert_allclose(normalize_image(np.array([[0.0, 2.0, 4.0]])), [[0, 0.5, 1]])
    with pytest.raises(InvalidInputError):
        normalize_image(np.array([[0.0, np.nan]]))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (6, 5), elements=st.floats(-1e3, 1e3)))
def test_normalize_is_idempotent_and_bounded(img):
    once = normalize_image(img)
    assert once.min() >= 0 and once.max() <= 1
    np.testing.assert_allclose(normalize_image(once), once, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 6), st.integers(0, 4))
def test_bilinear_exact_on_grid(x, y):
    img = np.arange(35, dtype=float).reshape(5, 7)
    assert bilinear_sample(img, np.array([float(x)]), np.array([float(y)]))[0] == img[y, x]


def test_crop_and_rescale_examples():
    img = np.array([[1.0, 3.0], [5.0, 7.0]])
    out = crop_and_rescale(img, (0, 0, 2, 2), 2, 2)
    assert np.array_equal(out, img) and out is not img
    np.testing.assert_allclose(crop_and_rescale(img, (0, 0, 2, 2), 1, 1), [[4.0]])
    with pytest.raises(InvalidInputError):
        crop_and_rescale(img, (1, 0, 2, 2), 1, 1)
    with pytest.raises(InvalidInputError):
        crop_and_rescale(img, (0, 0, 0, 2), 1, 1)


def test_exposure_control():
    cfg = ExposureConfig(target_mean=0.4)
    assert adapt_exposure(cfg, [0.4], 0.2) == pytest.approx(0.2)
    assert adapt_exposure(cfg, [0.2], 0.2) == pytest.approx(0.4)
    assert adapt_exposure(cfg, [0.0001], 5.0) == 10.0  # clamped
    assert adapt_exposure(ExposureConfig("Bracketing"), [], 0.1) == pytest.approx([0.05, 0.1, 0.2])
    with pytest.raises(InvalidInputError):
        ExposureConfig("Auto")


def test_merge_brackets_prefers_midscale():
    short = np.array([[0.1, 0.45]])
    long = np.array([[0.5, 0.95]])
    out = merge_brackets([short, long], [1.0, 4.0])
    np.testing.assert_allclose(out, [[0.5 / 4.0, 0.45]])


def _planes(h=6, w=5, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((h, w)) for _ in range(N_CHANNELS)]


def test_assemble_cube_masks():
    planes = _planes()
    assert assemble_cube(planes).validity_mask.all()
    masks = [np.ones((6, 5), bool) for _ in planes]
    masks[4][0, 0] = False
    cube = assemble_cube(planes, masks=masks)
    assert not cube.validity_mask[0, 0] and cube.validity_mask.sum() == 29
    bad = planes[:-1] + [np.zeros((6, 4))]
    with pytest.raises(InvalidInputError):
        assemble_cube(bad)


def test_cube_roundtrip(tmp_path):
    masks = [np.ones((6, 5), bool) for _ in range(N_CHANNELS)]
    masks[0][2, 3] = False
    cube = assemble_cube(_planes(), masks=masks)
    write_cube(cube, tmp_path / "c.msc1")
    back = read_cube(tmp_path / "c.msc1")
    np.testing.assert_array_equal(back.channels, cube.channels.astype(np.float32))
    np.testing.assert_array_equal(back.validity_mask, cube.validity_mask)
    assert back.channel_meta == cube.channel_meta


def test_cube_reader_rejects_garbage(tmp_path):
    (tmp_path / "x.msc1").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(InvalidInputError):
        read_cube(tmp_path / "x.msc1")
    cube = assemble_cube(_planes())
    write_cube(cube, tmp_path / "c.msc1")
    data = (tmp_path / "c.msc1").read_bytes()
    (tmp_path / "t.msc1").write_bytes(data[:-7])
    with pytest.raises(InvalidInputError):
        read_cube(tmp_path / "t.msc1")


def test_load_raw_capture(tmp_path):
    from PIL import Image

    img = (np.arange(64, dtype=np.uint16).reshape(8, 8) * 100)
    Image.fromarray(img).save(tmp_path / "f.png")
    (tmp_path / "f.json").write_text(json.dumps({"filter_index": 10, "exposure_s": 0.8}))
    cap = load_raw_capture(tmp_path / "f.png")
    assert cap.band.camera == "SWIR" and cap.exposure_used_s == 0.8
    np.testing.assert_array_equal(cap.image[:, :, 0], img)
    with pytest.raises(InvalidInputError):
        RawCapture(np.zeros((4, 4)), canonical_band_table()[3], 0.01)
