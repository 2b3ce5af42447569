import numpy as np
import pytest
from scipy.optimize import minimize

from distexit.data import (
    PRESETS,
    Dataset,
    DatasetFormatError,
    DatasetSpec,
    clean_labels,
    generate,
    hash_text,
    load_dataset,
    load_text_csv,
    save_dataset,
    simplex_vertices,
)


def linear_fit_accuracy(Xtr, ytr, Xte, yte):
    """Least-squares linear classifier on +-1 targets, refined by logistic BFGS."""
    A = np.hstack([Xtr, np.ones((len(Xtr), 1))])
    s = 2.0 * ytr - 1.0
    w0 = np.linalg.lstsq(A, s, rcond=None)[0]

    def objective(w):
        z = s * (A @ w)
        return np.sum(np.logaddexp(0.0, -z)) + 1e-4 * w @ w

    w = minimize(objective, w0, method="BFGS").x
    pred = (np.hstack([Xte, np.ones((len(Xte), 1))]) @ w) > 0
    return float(np.mean(pred == yte))


class TestGenerate:
    def test_separable_case(self):
        spec = DatasetSpec(n_classes=2, d_in=2, easy_fraction=1.0, easy_margin=10.0, label_noise=0.0,
                           n_train=2000, n_dev=10, n_test=2000, seed=0)
        tr, _, te = generate(spec)
        assert linear_fit_accuracy(tr.X, tr.y, te.X, te.y) >= 0.999

    def test_bit_identical_per_seed(self):
        a = generate(DatasetSpec(seed=7))
        b = generate(DatasetSpec(seed=7))
        for x, y in zip(a, b):
            assert x.X.tobytes() == y.X.tobytes() and x.y.tobytes() == y.y.tobytes()
        c = generate(DatasetSpec(seed=8))
        assert a[0].X.tobytes() != c[0].X.tobytes()

    def test_full_label_noise_flips_everything(self):
        spec = DatasetSpec(label_noise=1.0, n_train=4000, seed=1)
        tr, _, _ = generate(spec)
        clean, _, _ = clean_labels(spec)
        agreement = np.mean(tr.y == clean)
        # binomial tolerance around 0: with every label flipped the count is exactly 0
        assert agreement <= 3 * np.sqrt(0.25 / len(clean)) and agreement == 0.0

    def test_partial_label_noise_rate(self):
        spec = DatasetSpec(label_noise=0.2, n_train=10000, seed=2)
        tr, _, _ = generate(spec)
        clean, _, _ = clean_labels(spec)
        rate = np.mean(tr.y != clean)
        assert abs(rate - 0.2) < 5 * np.sqrt(0.2 * 0.8 / 10000)

    def test_split_sizes_and_disjoint(self):
        spec = DatasetSpec(n_train=500, n_dev=120, n_test=77, seed=3)
        tr, dv, te = generate(spec)
        assert (len(tr), len(dv), len(te)) == (500, 120, 77)
        rows = [tuple(r) for ds in (tr, dv, te) for r in ds.X]
        assert len(set(rows)) == len(rows)

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_balanced_priors(self, k):
        spec = DatasetSpec(n_classes=k, d_in=6, n_train=6000, seed=k)
        tr, _, _ = generate(spec)
        counts = np.bincount(tr.y, minlength=k)
        p = 1.0 / k
        sigma = np.sqrt(len(tr) * p * (1 - p))
        assert np.all(np.abs(counts - len(tr) * p) <= 5 * sigma)

    def test_shift_moves_test_only(self):
        shift = tuple(float(v) for v in np.arange(8) * 0.5)
        base = generate(DatasetSpec(seed=4))
        shifted = generate(DatasetSpec(seed=4, shift=shift))
        assert shifted[0].X.tobytes() == base[0].X.tobytes()
        assert shifted[1].X.tobytes() == base[1].X.tobytes()
        np.testing.assert_allclose(shifted[2].X - base[2].X, np.broadcast_to(shift, base[2].X.shape), atol=1e-12)

    def test_train_and_test_same_distribution(self):
        tr, _, te = generate(DatasetSpec(n_train=20000, n_test=20000, seed=5))
        for k in range(2):
            a, b = tr.X[tr.y == k], te.X[te.y == k]
            se = np.sqrt(a.var(axis=0) / len(a) + b.var(axis=0) / len(b))
            assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 5 * se)

    def test_margins_control_cluster_spread(self):
        spec = DatasetSpec(n_train=20000, easy_fraction=0.5, easy_margin=6.0, hard_margin=1.5, seed=6)
        tr, _, _ = generate(spec)
        verts = simplex_vertices(2, 8)
        proj = tr.X @ (verts[0] - verts[1])
        # class-0 projections mix components centred at 0.5*6 and 0.5*1.5
        mean = proj[tr.y == 0].mean()
        assert mean == pytest.approx(0.5 * (0.5 * 6.0 + 0.5 * 1.5), abs=0.05)

    def test_invalid_specs(self):
        for bad in ({"n_classes": 1}, {"n_train": 0}, {"easy_fraction": 1.5}, {"label_noise": -0.1},
                    {"easy_margin": 0.0}, {"shift": (1.0,)}):
            with pytest.raises(ValueError):
                DatasetSpec(**bad)

    def test_spec_round_trip(self):
        spec = DatasetSpec(shift=tuple([0.5] * 8))
        assert DatasetSpec.from_dict(spec.to_dict()) == spec

    def test_presets(self):
        assert PRESETS["easy"].n_train == 2000
        assert PRESETS["default"] == DatasetSpec()


@pytest.mark.parametrize("k", [2, 3, 4, 7])
def test_simplex_is_equilateral(k):
    v = simplex_vertices(k, k + 2)
    d = np.linalg.norm(v[:, None] - v[None], axis=2)
    off = d[~np.eye(k, dtype=bool)]
    np.testing.assert_allclose(off, 1.0, atol=1e-12)
    np.testing.assert_allclose(v.mean(axis=0), 0.0, atol=1e-12)


class TestFiles:
    def test_round_trip(self, tmp_path):
        tr, _, _ = generate(DatasetSpec(n_train=100, seed=9))
        save_dataset(tr, tmp_path / "d.jsonl")
        back = load_dataset(tmp_path / "d.jsonl")
        assert np.array_equal(back.y, tr.y)
        np.testing.assert_allclose(back.X, tr.X, atol=1e-12)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert len(load_dataset(tmp_path / "e.jsonl")) == 0

    def test_non_integer_label_names_line(self, tmp_path):
        (tmp_path / "b.jsonl").write_text('{"x": [1, 2], "y": 0}\n{"x": [1, 2], "y": 1.5}\n')
        with pytest.raises(DatasetFormatError, match=":2:"):
            load_dataset(tmp_path / "b.jsonl")

    def test_malformed_json_names_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"x": [1], "y": 0}\n{"x": [1], "y": 0}\n{oops\n')
        with pytest.raises(DatasetFormatError, match=":3:"):
            load_dataset(tmp_path / "m.jsonl")

    def test_dimension_mismatch(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"x": [1, 2], "y": 0}\n{"x": [1], "y": 1}\n')
        with pytest.raises(DatasetFormatError, match="dimension"):
            load_dataset(tmp_path / "d.jsonl")

    def test_dataset_unpacks(self):
        X, y = Dataset(np.zeros((2, 3)), np.array([0, 1]))
        assert X.shape == (2, 3) and list(y) == [0, 1]


class TestText:
    def test_hash_is_normalized_and_stable(self):
        v = hash_text("the cat sat on the mat", 16)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(v, hash_text("The cat sat on the mat", 16))
        assert not hash_text("", 16).any()

    def test_csv_ingestion(self, tmp_path):
        (tmp_path / "t.csv").write_text("text,label\ngood movie,pos\nbad film,neg\n\"great, fun\",pos\n")
        ds, vocab = load_text_csv(tmp_path / "t.csv", 32)
        assert vocab == ["neg", "pos"]
        assert ds.y.tolist() == [1, 0, 1]
        assert ds.X.shape == (3, 32)

    def test_numeric_labels_sorted_numerically(self, tmp_path):
        (tmp_path / "n.csv").write_text("text,label\na,10\nb,2\n")
        _, vocab = load_text_csv(tmp_path / "n.csv", 4)
        assert vocab == ["2", "10"]

    def test_header_required(self, tmp_path):
        (tmp_path / "h.csv").write_text("good movie,pos\n")
        with pytest.raises(DatasetFormatError, match="header"):
            load_text_csv(tmp_path / "h.csv", 8)
