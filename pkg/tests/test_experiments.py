import csv
import io
import json

import numpy as np
import pytest

from fedamc import experiments as ex
from fedamc import flcore as fl
from fedamc.errors import ConfigurationError, DimensionError
from fedamc.signal import SNR_GRID

# A configuration small enough to run whole protocols in a few seconds.
TINY = ex.RunConfig(
    seed=3,
    clients=3,
    global_epochs=2,
    local_epochs=1,
    batch_size=16,
    queue=40,
    clusters=2,
    repeats=2,
    schemes=(0, 4),
    frames_per_cell=4,
    test_frames_per_cell=2,
    samples_per_round=24,
    feature_bounds=(6, 10),
    queue_extension=10,
    queue_unit=10,
    channels=(2, 3),
    hidden=8,
)


class TestRunConfig:
    def test_full_scale_defaults(self):
        c = ex.RunConfig()
        assert (c.clients, c.local_epochs, c.global_epochs, c.batch_size) == (10, 10, 100, 400)
        assert (c.lr, c.queue, c.clusters, c.theta, c.repeats) == (1e-3, 1500, 2, -12, 4)

    @pytest.mark.parametrize("change", [
        dict(theta=-11), dict(theta=20), dict(clients=0), dict(batch_size=-1), dict(snr_grid=(1,)),
        dict(clusters=11), dict(schemes=(0, 0)), dict(schemes=(9,)), dict(scenario="weird"),
        dict(algorithm="sgd"), dict(lr=0.0), dict(feature_bounds=(600, 400)),
    ])
    def test_invalid(self, change):
        with pytest.raises(ConfigurationError):
            ex.RunConfig(**change)

    def test_hash_ignores_seed_but_run_id_does_not(self):
        a, b = TINY, TINY.replace(seed=4)
        assert a.config_hash() == b.config_hash()
        assert a.run_id() != b.run_id()
        assert TINY.replace(theta=-10).config_hash() != a.config_hash()

    def test_resolved_lists_every_field(self):
        keys = [line.split("=")[0] for line in TINY.resolved().splitlines()]
        assert keys[0] == "seed" and "queue_extension" in keys and len(keys) == len(set(keys))


class TestThetaCandidates:
    def test_grid(self):
        th = ex.theta_candidates()
        assert len(th) == 20
        assert th[0] == -20 and th[-1] == 18
        assert all(t % 2 == 0 for t in th)


@pytest.fixture(scope="module")
def result():
    return ex.run_theta_sweep(TINY, thetas=[-20, 0, 18])


class TestSweep:
    def test_equal_sizes(self, result):
        # size of the 18 dB slice: classes x frames per cell
        assert {r.train_size for r in result.rows} == {2 * 4}

    def test_row_groups(self, result):
        assert result.thetas() == [-20, 0, 18]
        assert len(result.rows) == 3 * TINY.repeats
        for t in result.thetas():
            vals = [r.max_test_accuracy for r in result.rows if r.theta == t]
            assert result.std_accuracy(t) == pytest.approx(np.std(vals))

    def test_best_theta_is_argmax(self, result):
        means = {t: result.mean_accuracy(t) for t in result.thetas()}
        assert means[result.best_theta] == max(means.values())

    def test_records_per_epoch_and_seeded_ids(self, result):
        assert len(result.records) == 3 * TINY.repeats * TINY.global_epochs
        assert {r.run_id for r in result.records} == {TINY.run_id(3), TINY.run_id(4)}

    def test_deterministic(self, result):
        again = ex.run_theta_sweep(TINY, thetas=[-20, 0, 18])
        assert ex.metrics_csv(again.records) == ex.metrics_csv(result.records)

    def test_18_row_trains_on_18_only(self, monkeypatch):
        seen = []
        real_fit = ex.nn.fit

        def spy(model, x, y, *a, **k):
            seen.append(len(x))
            return real_fit(model, x, y, *a, **k)

        real_filter = ex.filter_by_snr
        filtered = []

        def filt(ds, theta):
            out = real_filter(ds, theta)
            filtered.append(set(np.unique(out.snr_db)))
            return out

        monkeypatch.setattr(ex.nn, "fit", spy)
        monkeypatch.setattr(ex, "filter_by_snr", filt)
        res = ex.run_theta_sweep(TINY.replace(repeats=1, global_epochs=1), thetas=[18])
        assert filtered == [{18}]
        assert seen == [8]
        assert res.rows[0].train_size == 8


class TestFederatedProtocols:
    def test_curve_length_and_records(self):
        pool, test = ex.make_pools(TINY)
        curve = ex.run_algorithm(TINY, "fedvaccine", pool, test)
        assert len(curve.metrics) == TINY.global_epochs
        recs = curve.records(TINY)
        assert [r.round for r in recs] == [1, 2]
        assert recs[0].clusters == 2 and recs[0].queue == 40 and recs[0].theta == -12

    def test_zero_clusters_means_chain(self):
        pool, test = ex.make_pools(TINY)
        curve = ex.run_algorithm(TINY, "fedvaccine", pool, test, clusters=0)
        assert curve.algorithm == "chain"

    def test_iid_comparison_pairs(self):
        out = ex.run_iid_comparison(TINY.replace(global_epochs=1), thetas=[-12, 18])
        assert [(c.theta, c.algorithm) for c in out] == [(-12, "fedavg"), (-12, "fedvaccine"),
                                                        (18, "fedavg"), (18, "fedvaccine")]

    def test_noniid_extends_queue_and_pairs_data(self, monkeypatch):
        hashes = {}
        real = ex.make_data_fn

        def spying(seed, pool, spec):
            fn = real(seed, pool, spec)

            def wrapped(c, r):
                d = fn(c, r)
                hashes.setdefault(spec.kind.value, []).append((c, r, d.content_hash()))
                return d

            return wrapped

        monkeypatch.setattr(ex, "make_data_fn", spying)
        cfg = TINY.replace(global_epochs=1)
        out = ex.run_noniid_benchmark(cfg, scenarios=["feat-var"], algorithms=["fedavg", "fedvaccine"])
        assert {c.queue for c in out} == {50}
        draws = hashes["feat-var"]
        half = len(draws) // 2
        assert sorted(draws[:half]) == sorted(draws[half:])

    def test_noniid_rejects_iid(self):
        with pytest.raises(ConfigurationError):
            ex.run_noniid_benchmark(TINY, scenarios=["iid"])

    def test_epochs_to_reach(self):
        assert ex.epochs_to_reach([0.1, 0.3, 0.5], 0.3) == 2
        assert ex.epochs_to_reach([0.1], 0.3) is None


class TestAblation:
    def test_setting_lists(self):
        assert len(ex.CLUSTER_SETTINGS) == 7
        assert ex.QUEUE_MULTIPLIERS == (0, 1, 2, 3, 4, 5, 10)
        bands = list(ex.SNR_BANDS.values())
        assert bands[0] == tuple(range(-20, -9, 2))
        assert bands[1] == (-10, -8, -6, -4, -2)
        assert bands[2] == (0, 2, 4, 6, 8)
        assert bands[3] == (10, 12, 14, 16, 18)

    def test_queue_memory_column(self):
        rows = ex.run_ablation("queue", TINY.replace(global_epochs=1, queue_unit=1000), settings=[0, 3])
        assert [r.memory for r in rows] == ["+0KB", "+3000KB"]
        assert [r.setting for r in rows] == ["0", "3"]

    def test_cluster_rows(self):
        rows = ex.run_ablation("cluster", TINY.replace(global_epochs=1), settings=[1, 3, 0])
        assert [r.setting for r in rows] == ["1", "3", "None"]
        assert rows[-1].curve.algorithm == "chain"

    def test_snr_band_data(self, monkeypatch):
        seen = set()
        real = ex.make_data_fn

        def spying(seed, pool, spec):
            seen.update(np.unique(pool.snr_db).tolist())
            return real(seed, pool, spec)

        monkeypatch.setattr(ex, "make_data_fn", spying)
        rows = ex.run_ablation("snr-range", TINY.replace(global_epochs=1), settings=["0..8"])
        assert seen == {0, 2, 4, 6, 8}
        assert rows[0].setting == "0..8" and 0 <= rows[0].max_accuracy <= 1

    def test_kind_parse(self):
        assert ex.AblationKind.parse("SNR_RANGE") is ex.AblationKind.SNR_RANGE
        with pytest.raises(ConfigurationError):
            ex.AblationKind.parse("depth")


class TestPCA:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense_eigensolver(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((5, 7))
        cov = a @ a.T
        vals, comps = ex.top_eigenpairs(cov, 5)
        w, v = np.linalg.eigh(cov)
        w, v = w[::-1], v[:, ::-1].T
        np.testing.assert_allclose(vals, w, rtol=1e-9)
        for got, ref in zip(comps, v):
            assert min(np.abs(got - ref).max(), np.abs(got + ref).max()) < 1e-6
        np.testing.assert_allclose(comps @ comps.T, np.eye(5), atol=1e-8)

    def test_projection_variances_are_eigenvalues(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((400, 6)) @ rng.standard_normal((6, 6))
        res = ex.pca_matrix(x, 3)
        np.testing.assert_allclose(res.projections.var(axis=0, ddof=1), res.explained_variance, atol=1e-6)
        assert np.all(np.diff(res.explained_variance) <= 0)

    def test_rank_one_line(self):
        rng = np.random.default_rng(1)
        x = np.outer(rng.standard_normal(40), rng.standard_normal(256))
        with pytest.warns(ex.RankWarning):
            res = ex.pca_matrix(x, 3)
        assert len(res.components) == 1
        np.testing.assert_allclose(res.explained_ratio, [1.0])

    def test_dataset_projection(self):
        pool, _ = ex.make_pools(TINY)
        res = ex.pca_project(pool, 3)
        assert res.projections.shape == (len(pool), 3)
        assert res.components.shape == (3, 2 * pool.frame_length)
        np.testing.assert_allclose(res.components @ res.components.T, np.eye(3), atol=1e-8)

    def test_too_few_samples(self):
        with pytest.raises(DimensionError):
            ex.pca_matrix(np.ones((3, 4)), 3)


class TestOutput:
    def test_csv_schema(self):
        rec = ex.MetricRecord("abc-s0", "fedavg", "iid", 1, -12, 2, 1500, 0.5, 1.25, {-20: 0.1, 18: 0.9})
        rows = list(csv.reader(io.StringIO(ex.metrics_csv([rec]))))
        assert rows[0][:9] == ["run_id", "algorithm", "scenario", "round", "theta", "clusters", "queue",
                               "accuracy", "loss"]
        assert rows[0][9:] == [f"snr_{s}" for s in SNR_GRID]
        assert rows[1][9] == "0.100000" and rows[1][-1] == "0.900000" and rows[1][10] == ""

    def test_lf_line_endings(self, tmp_path):
        rec = ex.MetricRecord("a", "b", "iid", 1, 0, 0, 0, 0.0, 0.0)
        ex.write_metrics_csv([rec], tmp_path / "m.csv")
        raw = (tmp_path / "m.csv").read_bytes()
        assert b"\r" not in raw and raw.count(b"\n") == 2

    def test_summary_roundtrip(self, tmp_path):
        ex.write_summary({"best_theta": -8}, tmp_path / "s.json")
        assert json.loads((tmp_path / "s.json").read_text()) == {"best_theta": -8}

    def test_round_metrics_conversion(self):
        m = fl.RoundMetrics(3, "fedavg", 0.5, 1.0, {0: 0.5}, (1, 2), 0.1)
        rec = ex.MetricRecord.from_round(m, "id", "iid", -12, 2, 10)
        assert (rec.round, rec.accuracy, rec.per_snr) == (3, 0.5, {0: 0.5})
