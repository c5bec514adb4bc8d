import numpy as np
import pytest

from zbcnn.data import load_manifest
from zbcnn.errors import UsageError
from zbcnn.synth import (FACTORS, SYNTH_CLASSES, classify_factors, draw_factors, fau_set, read_factors,
                         render_face, synth_generate, write_synth)
from zbcnn.tensor import Rng


def test_happy_always_has_a3():
    rng = Rng(0)
    for _ in range(200):
        assert 3 in fau_set(draw_factors("happy", rng))


@pytest.mark.parametrize("cls", SYNTH_CLASSES)
def test_factors_round_trip_to_class(cls):
    rng = Rng(1)
    for _ in range(50):
        assert classify_factors(draw_factors(cls, rng)) == cls


def test_signature_faus():
    rng = Rng(2)
    expected = {"neutral": set(), "happy": {3}, "sad": {4}, "surprise": {1, 5}, "anger": {2}, "disgust": {6}}
    for cls, faus in expected.items():
        for _ in range(20):
            got = fau_set(draw_factors(cls, rng))
            # sad's mild brow raise, U[0.3, 0.6], crosses the A1 threshold part of the time
            assert got - {1} == faus if cls == "sad" else got == faus


def test_generate_is_deterministic():
    a = synth_generate(10, 3, rng=Rng(9))
    b = synth_generate(10, 3, rng=Rng(9))
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    assert a.labels.tolist() == b.labels.tolist()


def test_subject_shares_geometry(small_synth):
    by_subject = {}
    for s in small_synth:
        f = s.factors
        by_subject.setdefault(s.subject_id, set()).add((f["centre_y"], f["centre_x"], f["size"]))
    assert all(len(v) == 1 for v in by_subject.values())


def test_balanced_classes(small_synth):
    assert np.bincount(small_synth.labels).tolist() == [12] * 6


def test_render_is_bounded_and_clean_without_noise():
    f = draw_factors("surprise", Rng(4))
    img = render_face(f)
    assert img.shape == (96, 96) and 0 <= img.min() and img.max() <= 1
    assert np.array_equal(img, render_face(f))


def test_factor_moves_only_its_region():
    base = draw_factors("neutral", Rng(5))
    smile = dict(base, mouth_corner=0.9)
    diff = np.abs(render_face(smile) - render_face(base)) > 0
    rows = np.nonzero(diff.any(axis=1))[0]
    assert rows.min() > 48  # lower face only


def test_generate_errors():
    with pytest.raises(UsageError):
        synth_generate(5, 3, rng=Rng(0))
    with pytest.raises(UsageError):
        synth_generate(10, 3, classes=["bored"], rng=Rng(0))


def test_write_synth(tmp_path):
    ds = synth_generate(10, 2, rng=Rng(1))
    path = write_synth(ds, tmp_path)
    back = load_manifest(path, classes=SYNTH_CLASSES)
    assert len(back) == 20 and [s.fau_set for s in back] == [s.fau_set for s in ds]
    factors = read_factors(tmp_path / "factors.csv")
    assert set(factors[7]) == set(FACTORS)
    assert factors[7]["mouth_open"] == ds.samples[7].factors["mouth_open"]
