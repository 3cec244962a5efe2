from __future__ import annotations

import numpy as np
import pytest

from eomae.autodiff import Tensor
from eomae.encodings import (encoding_block, reference_date, sincos_2d,
                             spatial_table, table_digest, temporal_features)
from eomae.specs import ModalitySpec
from eomae.temporal import TimeRecord


def _spec(name, image_size, patch_size, **kw):
    base = dict(name=name, gsd_m=1.0, image_size=image_size, patch_size=patch_size,
                temporal_bins=1, channels=1, band_groups=[[0]])
    base.update(kw)
    return ModalitySpec(**base)


class TestSpatialTable:
    def test_single_modality_equals_raw_grid(self):
        spec = _spec("a", 8, 2)  # grid 4 == lcm
        table = spatial_table([spec], width=24)["a"]
        assert np.array_equal(table, sincos_2d(4, 16))

    def test_block_average_oracle(self, treesat):
        ds, _, di = treesat
        tables = spatial_table(ds.modalities, di.encoder_width)
        # S2 grid 3 inside lcm 15: each row averages a 5x5 block
        raw = sincos_2d(15, di.encoder_width - 8).reshape(15, 15, -1)
        expect = raw[5:10, 0:5].mean(axis=(0, 1))  # row 1, col 0 of the 3x3 grid
        assert np.allclose(tables["s2"][3], expect)

    def test_equal_grids_identical_tables(self):
        a, b = _spec("a", 8, 2), _spec("b", 16, 4)
        tables = spatial_table([a, b], width=24)
        assert np.array_equal(tables["a"], tables["b"])

    def test_mean_preserved_by_pooling(self, treesat):
        ds, _, di = treesat
        tables = spatial_table(ds.modalities, di.encoder_width)
        raw_mean = sincos_2d(15, di.encoder_width - 8).mean(axis=0)
        for name, table in tables.items():
            assert np.allclose(table.mean(axis=0), raw_mean)

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            spatial_table([_spec("a", 8, 2)], width=23)

    def test_deterministic_across_calls(self):
        spec = _spec("a", 16, 2)
        t1 = spatial_table([spec], 40)["a"]
        t2 = spatial_table([spec], 40)["a"]
        assert table_digest(t1) == table_digest(t2)


class TestTemporalFeatures:
    def test_zero_phases(self):
        t = TimeRecord(day_of_year=0.0, hour_of_day=0.0, absolute_day=100)
        feats = temporal_features(t, t)
        assert np.allclose(feats, [0, 1, 0, 1, 0, 0, 0, 0])

    def test_half_year_phase(self):
        t = TimeRecord(day_of_year=365.25 / 2, hour_of_day=0.0, absolute_day=100)
        feats = temporal_features(t, t)
        assert abs(feats[0]) < 1e-12 and np.isclose(feats[1], -1.0)

    def test_one_year_delta(self):
        ref = TimeRecord(day_of_year=1.0, hour_of_day=0.0, absolute_day=0)
        t = TimeRecord(day_of_year=1.0, hour_of_day=0.0, absolute_day=365)
        feats = temporal_features(t, ref)
        assert np.allclose(feats[4:], 365 / 365.25)

    def test_bounded_components(self, rng):
        ref = TimeRecord(1.0, 0.0, 0)
        for _ in range(50):
            t = TimeRecord(float(rng.uniform(0, 366)), float(rng.uniform(0, 24)),
                           int(rng.integers(0, 10000)))
            feats = temporal_features(t, ref)
            assert (np.abs(feats[:4]) <= 1.0 + 1e-12).all()


class TestAttach:
    def test_zero_encodings_identity(self, rng):
        tokens = Tensor(rng.normal(size=(5, 12)))
        enc = np.zeros((5, 12))
        out = tokens + Tensor(enc)
        assert np.array_equal(out.data, tokens.data)

    def test_same_position_time_same_row(self):
        spatial = sincos_2d(2, 8)
        t = TimeRecord(50.0, 12.0, 123)
        rows = encoding_block(spatial, temporal_features(t, t))
        rows2 = encoding_block(spatial, temporal_features(t, t))
        assert np.array_equal(rows, rows2)
        assert rows.shape == (4, 16)

    def test_attach_is_affine(self, rng):
        enc = Tensor(rng.normal(size=(4, 8)))
        a = rng.normal(size=(4, 8))
        attach = lambda x: (Tensor(x) + enc).data
        zero = attach(np.zeros((4, 8)))
        assert np.allclose(attach(a) - zero, a)


def test_reference_date_median():
    times = [TimeRecord(1, 0, d) for d in (10, 40, 1000)]
    assert reference_date(times).absolute_day == 40
    with pytest.raises(ValueError):
        reference_date([])


def test_golden_tables_match_shipped_digests():
    """Byte-exact regression against the shipped golden digests."""
    import json
    from importlib import resources
    from eomae import specs
    golden = json.loads((resources.files("eomae") / "goldens" / "encoding_tables.json")
                        .read_text(encoding="utf-8"))
    for name, entry in golden.items():
        ds, _, di = specs.load_preset(name)
        tables = spatial_table(ds.active_modalities(), di.encoder_width)
        for mod, info in entry.items():
            table = tables[mod]
            assert list(table.shape) == info["shape"]
            assert table_digest(table) == info["sha256"]
            assert np.allclose(table[0, :4], info["corner"])
