import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcdcast.data import (
    PanelSplit,
    RawObservation,
    SpeedPanel,
    StructuralError,
    SyntheticConfig,
    ValidationError,
    chronological_split,
    generate_synthetic,
    load_panel,
    mask_night_hours,
    night_slot_mask,
    read_ffs_csv,
    read_panel,
    read_speeds_csv,
    split_day,
    write_panel,
)


class TestLoadPanel:
    def test_normalizes_by_free_flow(self):
        obs = [RawObservation(0, 0, 45.0), (1, 2, 100.0)]
        p = load_panel(obs, [90.0, 50.0], n_slots=3)
        assert p.values[0, 0] == 0.5
        assert p.values[1, 2] == 2.0
        assert p.valid.sum() == 2
        assert not p.valid[0, 1] and p.values[0, 1] == 0.0

    def test_length_from_last_slot(self):
        assert load_panel([(0, 9, 10.0)], [10.0]).n_slots == 10

    @pytest.mark.parametrize("ffs", [[0.0], [-1.0], [np.nan]])
    def test_bad_free_flow(self, ffs):
        with pytest.raises(ValidationError):
            load_panel([(0, 0, 1.0)], ffs)

    def test_negative_speed(self):
        with pytest.raises(ValidationError):
            load_panel([(0, 0, -3.0)], [10.0])

    def test_edge_out_of_range(self):
        with pytest.raises(StructuralError):
            load_panel([(2, 0, 3.0)], [10.0, 10.0])

    def test_panel_is_read_only(self):
        p = load_panel([(0, 0, 5.0)], [10.0])
        with pytest.raises(ValueError):
            p.values[0, 0] = 1.0


class TestNightMask:
    def test_boundaries_at_480_slots_per_day(self):
        m = night_slot_mask(480)
        # 20 slots per hour: 05:00 is slot 100, 23:00 is slot 460
        assert m[:100].all() and not m[100] and not m[459] and m[460:].all()
        assert m.sum() == 6 * 20

    def test_offset_follows_time_of_day(self):
        m = night_slot_mask(480, slot_offset=470)
        np.testing.assert_array_equal(m, np.roll(night_slot_mask(480), -470))

    def test_mask_keeps_values_and_length(self, small_panel):
        masked = mask_night_hours(small_panel)
        assert masked.n_slots == small_panel.n_slots
        np.testing.assert_array_equal(masked.values, small_panel.values)
        assert masked.valid.sum() == small_panel.valid.sum() * 18 // 24


class TestSplit:
    @pytest.mark.parametrize("n,frac,expected", [(60, 0.9, 54), (10, 0.9, 9), (10, 0.99, 9), (10, 0.01, 1), (7, 0.5, 4)])
    def test_split_day(self, n, frac, expected):
        assert split_day(n, frac) == expected

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValidationError):
            split_day(10, frac)

    def test_views_are_disjoint_and_cover(self, small_panel):
        s = chronological_split(small_panel, 0.8)
        assert isinstance(s, PanelSplit)
        assert s.train_range == (0, 8 * 480)
        assert s.test_range == (8 * 480, 10 * 480)
        np.testing.assert_array_equal(s.test.values, small_panel.values[:, 8 * 480:])
        assert s.test.slot_offset == 8 * 480


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(n_edges=8, n_days=12, rng_seed=7))
        b = generate_synthetic(SyntheticConfig(n_edges=8, n_days=12, rng_seed=7))
        assert a.equals(b)

    def test_seed_matters(self):
        a = generate_synthetic(SyntheticConfig(n_edges=8, n_days=12, rng_seed=7))
        b = generate_synthetic(SyntheticConfig(n_edges=8, n_days=12, rng_seed=8))
        assert not a.equals(b)

    def test_no_signal_is_free_flow(self):
        p = generate_synthetic(SyntheticConfig(n_edges=5, n_days=9, congestion_amplitude=0.0, noise_std=0.0))
        np.testing.assert_array_equal(p.values, 1.0)

    def test_rush_hours_are_slower_than_night(self):
        p = generate_synthetic(SyntheticConfig(n_edges=16, n_days=14, noise_std=0.0, rng_seed=2))
        day = p.values.reshape(16, 14, 480)
        weekdays = [d for d in range(14) if d % 7 != 6]
        morning = day[:, weekdays, 140:180].min(axis=2)   # 07:00-09:00
        night = day[:, weekdays, 20:60]
        assert np.all(night > 0.99)
        assert np.all(morning < 0.6)
        # the quiet weekly day dips far less: depth <= 0.6 * 1.08 * 1.05 * 0.3
        assert np.all(day[:, 6, 140:180].min(axis=1) >= 1 - 0.6 * 1.08 * 1.05 * 0.3 - 1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 0.5), st.integers(0, 1000))
    def test_values_clipped(self, amp, noise, seed):
        p = generate_synthetic(SyntheticConfig(n_edges=3, n_days=9, congestion_amplitude=amp,
                                               noise_std=noise, rng_seed=seed))
        assert p.values.min() >= 0.05 and p.values.max() <= 1.2

    def test_neighbouring_edges_correlate(self):
        p = generate_synthetic(SyntheticConfig(n_edges=32, n_days=14, rng_seed=3))
        x = p.values - p.values.mean(axis=1, keepdims=True)
        near = np.mean([np.corrcoef(x[l], x[(l + 1) % 32])[0, 1] for l in range(32)])
        assert near > 0.8

    @pytest.mark.parametrize("kw", [{"n_edges": 0}, {"n_days": 3}, {"congestion_amplitude": 1.5}, {"noise_std": -1}])
    def test_bad_config(self, kw):
        with pytest.raises(ValidationError):
            SyntheticConfig(**kw)


class TestFiles:
    def test_panel_roundtrip(self, tmp_path, small_panel):
        masked = mask_night_hours(small_panel)
        write_panel(masked, tmp_path / "p.bin")
        back = read_panel(tmp_path / "p.bin")
        assert back.equals(masked)

    def test_layout(self, tmp_path):
        p = SpeedPanel(np.array([[0.5, 1.0, 0.25]]), np.array([[True, False, True]]), [80.0], 3)
        write_panel(p, tmp_path / "p.bin")
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:4] == b"FCD1"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 3, 3]
        assert np.frombuffer(raw[16:40], "<f8").tolist() == [0.5, 1.0, 0.25]
        assert list(raw[40:43]) == [1, 0, 1]
        assert np.frombuffer(raw[43:51], "<f8").tolist() == [80.0]
        assert len(raw) == 51

    def test_missing_trailer_defaults_free_flow(self, tmp_path):
        p = SpeedPanel(np.ones((2, 4)), np.ones((2, 4), bool), [70.0, 60.0], 4)
        write_panel(p, tmp_path / "p.bin")
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "q.bin").write_bytes(raw[:-16])
        np.testing.assert_array_equal(read_panel(tmp_path / "q.bin").free_flow, [1.0, 1.0])

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(StructuralError):
            read_panel(tmp_path / "x.bin")
        (tmp_path / "y.bin").write_bytes(b"FCD1" + np.array([2, 5, 5], "<u4").tobytes())
        with pytest.raises(StructuralError):
            read_panel(tmp_path / "y.bin")

    def test_csv_ingest(self, tmp_path):
        (tmp_path / "s.csv").write_text("edge_id,slot,speed_kph\n0,0,30\n1,1,45\n")
        (tmp_path / "f.csv").write_text("edge_id,ffs_kph\n1,90\n0,60\n")
        p = load_panel(read_speeds_csv(tmp_path / "s.csv"), read_ffs_csv(tmp_path / "f.csv"))
        assert p.values[0, 0] == 0.5 and p.values[1, 1] == 0.5

    def test_csv_missing_column(self, tmp_path):
        (tmp_path / "s.csv").write_text("edge,slot,speed_kph\n0,0,30\n")
        with pytest.raises(StructuralError):
            list(read_speeds_csv(tmp_path / "s.csv"))

    def test_ffs_gap(self, tmp_path):
        (tmp_path / "f.csv").write_text("edge_id,ffs_kph\n0,60\n2,90\n")
        with pytest.raises(StructuralError):
            read_ffs_csv(tmp_path / "f.csv")
