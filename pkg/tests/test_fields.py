import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from waam_pino.fields import (FieldError, FieldFrame, FieldSequence, GridGeometry, NormStats,
                              RegionConfig, build_region_masks, denormalize, normalize,
                              normalize_array)

STATS = NormStats({"T": 300.0, "Uz": -1e-3, "Uy": -2e-4}, {"T": 1800.0, "Uz": 0.0, "Uy": 3e-4})


def _frame(T, active=None, uz=None, uy=None):
    T = np.asarray(T, dtype=float)
    active = np.ones(T.shape, bool) if active is None else active
    uz = np.zeros(T.shape) if uz is None else uz
    uy = np.zeros(T.shape) if uy is None else uy
    return FieldFrame(T, uz, uy, active)


def _seq(frames):
    geom = GridGeometry(*frames[0].shape)
    return FieldSequence(geom, tuple(frames), (None,) * len(frames), (0,) * len(frames))


def test_geometry_defaults():
    g = GridGeometry()
    assert g.dx == 0.002 and g.dt == 1.0
    with pytest.raises(FieldError):
        GridGeometry(1, 5)
    with pytest.raises(FieldError):
        GridGeometry(4, 4, dx=0.0)


def test_normalize_bounds_and_midpoint():
    assert normalize_array(300.0, STATS, "T") == 0.0
    assert normalize_array(1800.0, STATS, "T") == 1.0
    assert normalize_array(1050.0, STATS, "T") == pytest.approx(0.5, abs=1e-15)
    # clamped outside the range
    assert normalize_array(5000.0, STATS, "T") == 1.0


def test_constant_channel_maps_to_zero():
    stats = NormStats({"T": 1.0, "Uz": 0.0, "Uy": 0.0}, {"T": 2.0, "Uz": 0.0, "Uy": 1.0})
    assert stats.is_constant("Uz")
    assert np.all(normalize_array(np.ones(3), stats, "Uz") == 0.0)


def test_missing_channel_is_an_error():
    with pytest.raises(FieldError):
        NormStats({"T": 0.0}, {"T": 1.0})


def test_sequence_dimension_mismatch():
    f1 = _frame(np.full((3, 4), 400.0))
    f2 = _frame(np.full((4, 4), 400.0))
    with pytest.raises(FieldError):
        FieldSequence(GridGeometry(3, 4), (f1, f2), (None, None), (0, 0))


def test_frames_are_immutable():
    f = _frame(np.full((3, 3), 400.0))
    with pytest.raises(ValueError):
        f.temperature[0, 0] = 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(0.0, 1.0)))
def test_roundtrip_in_range(u):
    T = 300.0 + 1500.0 * u
    uz = -1e-3 + 1e-3 * u[::-1]
    uy = -2e-4 + 5e-4 * u
    frames = [_frame(T[k], uz=uz[k], uy=uy[k]) for k in range(3)]
    seq = _seq(frames)
    back = denormalize(normalize(seq, STATS), STATS)
    for a, b in zip(seq.frames, back.frames):
        for ch in ("T", "Uz", "Uy"):
            np.testing.assert_allclose(b.channel(ch), a.channel(ch), rtol=1e-6, atol=1e-18)
        assert np.array_equal(a.active, b.active)


def test_region_masks_no_active_cells():
    f = _frame(np.full((8, 10), 293.15), active=np.zeros((8, 10), bool))
    m = build_region_masks(f, None, RegionConfig(substrate_rows=2))
    assert not m.molten.any() and not m.deposited.any()
    assert m.roi[2:, 7:].all() and m.roi.sum() == 6 * 3


def test_region_masks_ambient_no_source():
    active = np.zeros((6, 6), bool)
    active[:3] = True
    f = _frame(np.full((6, 6), 293.15), active=active)
    m = build_region_masks(f, None)
    assert not m.molten.any()
    assert np.array_equal(m.deposited, active)


def test_single_hot_cell_is_molten():
    T = np.full((5, 5), 293.15)
    T[2, 3] = 2000.0
    m = build_region_masks(_frame(T), None, RegionConfig(melt_threshold=1750.0))
    assert m.molten.sum() == 1 and m.molten[2, 3]
    assert not m.deposited[2, 3]


def test_pool_radius_around_source():
    m = build_region_masks(_frame(np.full((9, 9), 293.15)), (4.0, 4.0), RegionConfig(pool_radius=2))
    # lattice points within Euclidean distance 2 of the center
    assert m.molten.sum() == 13


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(250.0, 2500.0)),
       arrays(np.bool_, (6, 7)),
       st.one_of(st.none(), st.tuples(st.floats(0, 5), st.floats(0, 6))))
def test_region_partition(T, active, source):
    f = FieldFrame(np.where(active, T, 293.15), np.zeros((6, 7)), np.zeros((6, 7)), active)
    m = build_region_masks(f, source)
    assert np.array_equal(m.molten | m.deposited, active)
    assert not (m.molten & m.deposited).any()
    assert not (m.molten & ~m.overall).any()
    assert not (m.roi & ~m.overall).any()
