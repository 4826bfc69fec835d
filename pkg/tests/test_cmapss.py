import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnmr import cmapss
from gnmr.channels import CHANNEL_INDEX, N_CHANNELS, SENSORS
from gnmr.cmapss import (
    EngineRun,
    NormalizationStats,
    apply_normalization,
    fit_normalization,
    make_test_windows,
    make_windows,
    parse_cmapss,
    partition_by_node,
    pca_fit,
    prepare_dataset,
    split_train_val,
    window_ends,
)
from gnmr.errors import ConfigError, LoadError, ParseError
from gnmr.graph import default_graph, graph_from_dict

from .conftest import write_cmapss


def brute_force_ends(n_cycles, T, shift):
    """Enumerate every cycle and keep the ones a window should end on."""
    ends = [t for t in range(1, n_cycles + 1) if t >= T and (t - T) % shift == 0]
    if n_cycles not in ends:
        ends.append(n_cycles)
    return ends


def fake_runs(n):
    return [EngineRun(i + 1, np.zeros((5, N_CHANNELS)), 5) for i in range(n)]


class TestParse:
    def test_counts(self, small_cmapss):
        d, train_lengths, test_lengths, test_rul = small_cmapss
        train, test = parse_cmapss(d / "train_FD001.txt", d / "test_FD001.txt", d / "RUL_FD001.txt")
        assert len(train) == 10 and len(test) == 6
        assert [r.n_cycles for r in train] == train_lengths
        assert [r.failure_cycle for r in train] == train_lengths
        assert [r.failure_cycle for r in test] == [n + r for n, r in zip(test_lengths, test_rul)]
        assert all(r.channels.shape[1] == 24 for r in train)

    def test_empty_file(self, tmp_path, small_cmapss):
        d = small_cmapss[0]
        (tmp_path / "empty.txt").write_text("")
        with pytest.raises(ParseError, match="no data"):
            parse_cmapss(tmp_path / "empty.txt", d / "test_FD001.txt", d / "RUL_FD001.txt")

    def test_ragged_row_reports_line(self, tmp_path, small_cmapss):
        d = small_cmapss[0]
        lines = (d / "train_FD001.txt").read_text().splitlines()
        lines[4] = " ".join(lines[4].split()[:-1])
        bad = tmp_path / "bad.txt"
        bad.write_text("\n".join(lines))
        with pytest.raises(ParseError, match=r"bad.txt:5"):
            parse_cmapss(bad, d / "test_FD001.txt", d / "RUL_FD001.txt")

    def test_non_numeric(self, tmp_path, small_cmapss):
        d = small_cmapss[0]
        lines = (d / "train_FD001.txt").read_text().splitlines()
        lines[2] = lines[2].replace(lines[2].split()[5], "abc", 1)
        bad = tmp_path / "bad.txt"
        bad.write_text("\n".join(lines))
        with pytest.raises(ParseError, match=r":3: non-numeric"):
            parse_cmapss(bad, d / "test_FD001.txt", d / "RUL_FD001.txt")

    def test_rul_length_mismatch(self, tmp_path, small_cmapss):
        d = small_cmapss[0]
        (tmp_path / "rul.txt").write_text("10\n20\n")
        with pytest.raises(ParseError, match="2 RUL values for 6"):
            parse_cmapss(d / "train_FD001.txt", d / "test_FD001.txt", tmp_path / "rul.txt")


class TestSplit:
    @pytest.mark.parametrize("n,train,val", [(100, 80, 20), (5, 4, 1), (260, 208, 52), (249, 199, 50)])
    def test_sizes(self, n, train, val):
        a, b = split_train_val(fake_runs(n), 0.8, np.random.default_rng(0))
        assert (len(a), len(b)) == (train, val)

    def test_deterministic(self):
        runs = fake_runs(30)
        a = split_train_val(runs, 0.8, np.random.default_rng(9))
        b = split_train_val(runs, 0.8, np.random.default_rng(9))
        assert [r.unit_id for r in a[1]] == [r.unit_id for r in b[1]]

    def test_unit_level_partition(self):
        runs = fake_runs(30)
        a, b = split_train_val(runs, 0.8, np.random.default_rng(1))
        assert sorted(r.unit_id for r in a + b) == list(range(1, 31))

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ConfigError):
            split_train_val(fake_runs(5), ratio)


class TestNormalization:
    def stats(self):
        return NormalizationStats(np.array([0.0]), np.array([10.0]), np.array([0.0]))

    @pytest.mark.parametrize("value,expected", [(10.0, 1.0), (5.0, 0.0), (0.0, -1.0), (12.0, 1.4)])
    def test_examples(self, value, expected):
        run = EngineRun(1, np.array([[value]]), 1)
        assert apply_normalization(run, self.stats()).channels[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_constant_channel_maps_to_zero(self):
        run = EngineRun(1, np.column_stack([np.arange(5.0), np.full(5, 3.0)]), 5)
        stats = fit_normalization([run])
        out = apply_normalization(run, stats).channels
        np.testing.assert_array_equal(out[:, 1], 0.0)

    def test_extremes_map_to_unit_interval(self, small_cmapss):
        d = small_cmapss[0]
        train, _ = parse_cmapss(d / "train_FD001.txt", d / "test_FD001.txt", d / "RUL_FD001.txt")
        stats = fit_normalization(train)
        data = np.concatenate([apply_normalization(r, stats).channels for r in train])
        varying = stats.maximum > stats.minimum
        np.testing.assert_allclose(data.min(axis=0)[varying], -1.0, atol=1e-12)
        np.testing.assert_allclose(data.max(axis=0)[varying], 1.0, atol=1e-12)
        np.testing.assert_allclose(stats.pad_value, data.mean(axis=0), atol=1e-12)


class TestWindows:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 400), st.integers(1, 120), st.integers(1, 10))
    def test_ends_match_enumeration(self, n, T, shift):
        assert window_ends(n, T, shift) == brute_force_ends(n, T, shift)

    def test_clipped_target(self):
        run = EngineRun(1, np.zeros((300, 2)), 300)
        w = make_windows(run, 100, 5, 130.0)
        assert w.t_end[0] == 100
        assert w.rul[0] == 200
        assert w.targets[0] == 1.0

    def test_short_run_padding(self):
        run = EngineRun(1, np.arange(40.0).reshape(40, 1) + 1, 40)
        w = make_windows(run, 100, 5, 130.0, pad_value=np.array([-7.0]))
        assert len(w) == 1 and w.t_end[0] == 40
        np.testing.assert_array_equal(w.channels[0, :60, 0], -7.0)
        np.testing.assert_array_equal(w.channels[0, 60:, 0], np.arange(40.0) + 1)

    def test_window_contents(self):
        run = EngineRun(1, np.arange(130.0).reshape(130, 1), 130)
        w = make_windows(run, 100, 5, 130.0)
        np.testing.assert_array_equal(w.t_end, [100, 105, 110, 115, 120, 125, 130])
        for k, end in enumerate(w.t_end):
            np.testing.assert_array_equal(w.channels[k, :, 0], np.arange(end - 100, end))
        np.testing.assert_allclose(w.targets, (130 - w.t_end) / 130.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 350))
    def test_targets_in_unit_interval(self, n):
        w = make_windows(EngineRun(1, np.zeros((n, 1)), n), 100, 5, 130.0)
        assert np.all((w.targets >= 0) & (w.targets <= 1))
        np.testing.assert_array_equal(w.targets[w.rul > 130], 1.0)

    def test_test_windows(self, small_cmapss):
        d, _, test_lengths, test_rul = small_cmapss
        _, test = parse_cmapss(d / "train_FD001.txt", d / "test_FD001.txt", d / "RUL_FD001.txt")
        w = make_test_windows(test, 100, 130.0, pad_value=np.full(24, 0.25))
        assert len(w) == len(test)
        np.testing.assert_array_equal(w.t_end, test_lengths)
        np.testing.assert_array_equal(w.rul, test_rul)
        np.testing.assert_allclose(w.targets, np.minimum(test_rul, 130) / 130.0)
        np.testing.assert_array_equal(w.channels[0, : 100 - 31], 0.25)


class TestPartition:
    def test_identity_partition(self):
        g = graph_from_dict({"nodes": [{"name": "all", "sensors": list(SENSORS)}]})
        x = np.random.default_rng(0).normal(size=(100, 24))
        (block,) = partition_by_node(x, g)
        np.testing.assert_array_equal(block, x[:, 3:])

    def test_projection(self):
        g = graph_from_dict({"nodes": [{"name": "a", "sensors": ["T24", "T30"]}]})
        x = np.random.default_rng(0).normal(size=(100, 24))
        (block,) = partition_by_node(x, g)
        assert block.shape == (100, 2)
        np.testing.assert_array_equal(block, x[:, [CHANNEL_INDEX["T24"], CHANNEL_INDEX["T30"]]])

    def test_shared_sensor_copied(self):
        g = graph_from_dict({"nodes": [{"name": "a", "sensors": ["T24", "T2"]}, {"name": "b", "sensors": ["T24"]}]})
        x = np.random.default_rng(0).normal(size=(4, 100, 24))
        a, b = partition_by_node(x, g)
        np.testing.assert_array_equal(a[..., 0], b[..., 0])

    def test_lossless_on_turbofan(self):
        g = default_graph()
        x = np.random.default_rng(0).normal(size=(3, 100, 24))
        parts = partition_by_node(x, g)
        recovered = {}
        for j, block in enumerate(parts):
            for c, name in enumerate(g.input_columns(j)):
                recovered.setdefault(name, block[..., c])
        assert len(recovered) == 24
        for name, col in recovered.items():
            np.testing.assert_array_equal(col, x[..., CHANNEL_INDEX[name]])

    def test_sample_view(self, small_cmapss):
        ds = prepare_dataset("FD001", small_cmapss[0], window_length=50, shift=5)
        g = default_graph()
        s = ds.train.sample(0, g)
        assert len(s.node_series) == 8
        assert all(x.shape[0] == 50 for x in s.node_series)
        assert [x.shape[1] for x in s.node_series] == [len(g.input_columns(j)) for j in range(8)]


class TestPca:
    def test_rank_two_plane(self):
        rng = np.random.default_rng(0)
        basis = np.linalg.qr(rng.normal(size=(6, 2)))[0].T
        rows = rng.normal(size=(200, 2)) @ basis + 3.0
        t = pca_fit(rows, 2)
        assert t.explained_variance_ratio.sum() == pytest.approx(1.0, abs=1e-8)

    def test_full_basis_reconstruction(self):
        rows = np.random.default_rng(1).normal(size=(50, 5))
        t = pca_fit(rows, 5)
        np.testing.assert_allclose(t.inverse(t.apply(rows)), rows, atol=1e-8)
        np.testing.assert_allclose(t.components @ t.components.T, np.eye(5), atol=1e-8)
        assert np.all(np.diff(t.explained_variance_ratio) <= 0)

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            pca_fit(np.zeros((10, 3)), 4)

    def test_fit_on_windows(self, small_cmapss):
        ds = prepare_dataset("FD001", small_cmapss[0], window_length=50)
        t = pca_fit(ds.train, 5)
        assert t.components.shape == (5, 24)
        assert t.apply(ds.train.channels).shape == ds.train.channels.shape[:2] + (5,)


class TestPreparedDataset:
    def test_window_totals_split_invariant(self, small_cmapss):
        d, train_lengths, _, _ = small_cmapss
        expected = sum(len(brute_force_ends(n, 100, 5)) for n in train_lengths)
        for seed in range(4):
            ds = prepare_dataset("FD001", d, seed=seed)
            assert ds.summary["windows_train_val"] == expected
            assert ds.summary["instances_pre_split"] == 10
            assert (ds.summary["instances_train"], ds.summary["instances_val"]) == (8, 2)
            assert ds.summary["windows_test"] == 6

    def test_cache_round_trip_and_determinism(self, small_cmapss, tmp_path):
        ds = prepare_dataset("FD001", small_cmapss[0], graph_hash="abc", seed=3)
        path, digest = cmapss.save_dataset(ds, tmp_path / "cache")
        ds2 = prepare_dataset("FD001", small_cmapss[0], graph_hash="abc", seed=3)
        path2, digest2 = cmapss.save_dataset(ds2, tmp_path / "cache2")
        assert digest == digest2
        assert path.name == path2.name
        loaded = cmapss.load_dataset(path)
        np.testing.assert_array_equal(loaded.train.channels, ds.train.channels)
        np.testing.assert_array_equal(loaded.test.rul, ds.test.rul)
        assert loaded.summary == ds.summary
        assert loaded.graph_hash == "abc"
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest

    def test_cache_key_changes_with_params(self):
        a = cmapss.cache_key("FD001", "g", 100, 5, 130, 0)
        assert a != cmapss.cache_key("FD001", "g", 100, 5, 130, 1)
        assert a != cmapss.cache_key("FD001", "h", 100, 5, 130, 0)
        assert a != cmapss.cache_key("FD001", "g", 100, 5, 130, 0, ratio=0.7)

    def test_corrupt_cache(self, small_cmapss, tmp_path):
        ds = prepare_dataset("FD001", small_cmapss[0])
        blob = bytearray(cmapss.dumps_dataset(ds))
        blob[-3] ^= 0xFF
        with pytest.raises(LoadError):
            cmapss.loads_dataset(bytes(blob))

    def test_missing_files(self, tmp_path):
        with pytest.raises(ConfigError):
            prepare_dataset("FD002", tmp_path)

    def test_nested_data_dir(self, tmp_path):
        sub = tmp_path / "CMAPSSData"
        sub.mkdir()
        write_cmapss(sub, "FD003", [130, 140], [50], [20])
        assert prepare_dataset("FD003", tmp_path).summary["windows_test"] == 1
