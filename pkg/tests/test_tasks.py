import numpy as np
import pytest

from profuse.autodiff import Rng
from profuse.models import EncoderSpec, FusionSpec, PredictorSpec, build_base
from profuse.tasks import (
    LATTICE_CLASSES, GenerativeTaskConfig, LatticeTaskConfig, NoiseSpec, SyntheticDataset, corrupt,
    first_nonzero_digit, gen_generative, gen_lattice, generative_matrices, leaky_relu_np, load_csv,
    position_embedding, save_csv,
)
from profuse.training import TrainConfig, evaluate, train


def digit_oracle(v):
    """First non-zero digit read off a long fixed-point expansion of repr(v)."""
    from decimal import Decimal
    s = format(abs(Decimal(repr(float(v)))), "f")
    return int(next(c for c in s if c in "123456789"))


def recover_index(X2, D, p):
    table = position_embedding(np.arange(D) / D, p)
    return np.argmin(((X2[:, None, :] - table[None]) ** 2).sum(-1), axis=1)


class TestDigits:
    @pytest.mark.parametrize("v,d", [(0.537, 5), (-0.0049, 4), (0.3, 3), (1.0, 1), (9.99, 9), (2e-7, 2)])
    def test_examples(self, v, d):
        assert first_nonzero_digit(v) == d

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            first_nonzero_digit(0.0)
        with pytest.raises(ValueError):
            first_nonzero_digit(float("nan"))

    def test_matches_decimal_oracle(self):
        vals = Rng(0).normal(2000) * 10.0 ** Rng(1).integers(-6, 6, size=2000)
        assert all(first_nonzero_digit(v) == digit_oracle(v) for v in vals)


class TestPositionEmbedding:
    def test_shape_and_first_pair(self):
        e = position_embedding(np.array([0.25]), 6)
        assert e.shape == (1, 6)
        np.testing.assert_allclose(e[0, :2], [np.sin(np.pi / 4), np.cos(np.pi / 4)], rtol=1e-15)

    def test_lattice_points_distinct(self):
        e = position_embedding(np.arange(16) / 16, 16)
        d = ((e[:, None] - e[None]) ** 2).sum(-1) + np.eye(16)
        assert d.min() > 1e-3

    def test_odd_width(self):
        assert position_embedding(np.zeros(3), 5).shape == (3, 5)


class TestLattice:
    def setup_method(self):
        self.cfg = LatticeTaskConfig(D=8, n_train=300, n_val=50, n_test=60, seed=3)
        self.sp = gen_lattice(self.cfg)

    def test_shapes(self):
        assert self.sp.train.X1.shape == (300, 8) and self.sp.train.X2.shape == (300, 16)
        assert len(self.sp.val) == 50 and len(self.sp.test) == 60
        assert self.sp.train.kind == "classification"

    def test_labels_are_digit_at_lattice_point(self):
        for ds in (self.sp.train, self.sp.test):
            idx = recover_index(ds.X2, self.cfg.D, self.cfg.p)
            vals = ds.X1[np.arange(len(ds)), idx]
            assert np.all(np.abs(vals) >= 1e-9)
            assert all(y == digit_oracle(v) - 1 for y, v in zip(ds.Y, vals))

    def test_rows_are_smooth_bounded_mixtures(self):
        X1 = self.sp.train.X1
        assert np.abs(X1).max() <= self.cfg.M  # |sum a_m sin(.)| <= M
        # a fresh function per sample: rows are pairwise distinct
        assert len({tuple(r) for r in X1}) == len(X1)

    def test_deterministic(self):
        other = gen_lattice(self.cfg)
        assert np.array_equal(other.train.X1, self.sp.train.X1)
        assert np.array_equal(other.test.Y, self.sp.test.Y)

    def test_seed_changes_data(self):
        other = gen_lattice(LatticeTaskConfig(D=8, n_train=300, n_val=50, n_test=60, seed=4))
        assert not np.array_equal(other.train.X1, self.sp.train.X1)

    def test_label_distribution(self):
        sp = gen_lattice(LatticeTaskConfig(n_train=100_000, n_val=1, n_test=1, seed=0))
        freq = np.bincount(sp.train.Y, minlength=LATTICE_CLASSES) / 100_000
        assert freq.min() >= 0.02 and freq.max() <= 0.40

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            LatticeTaskConfig(D=1)
        with pytest.raises(ValueError):
            LatticeTaskConfig(n_val=0)
        with pytest.raises(ValueError):
            LatticeTaskConfig(f_max=0)

    @pytest.mark.parametrize("modality", [0, 1])
    def test_unimodal_insufficiency(self, modality):
        # a single modality is no better than the majority class by a wide margin
        sp = gen_lattice(LatticeTaskConfig(D=4, n_train=4000, n_val=500, n_test=2000, seed=1))

        def only(ds):
            x = ds.inputs[modality]
            return SyntheticDataset(x, np.zeros((len(ds), 1)), ds.Y, ds.kind)

        d = sp.train.inputs[modality].shape[1]
        m = build_base([EncoderSpec(d, (32, 32)), EncoderSpec(1, (1,))], FusionSpec(), PredictorSpec(9, (32,)), Rng(0))
        train(m, only(sp.train), only(sp.val), TrainConfig(lr=5e-3, epochs=30, batch_size=128))
        chance = np.bincount(sp.train.Y).max() / len(sp.train)
        assert evaluate(m, only(sp.test), "accuracy") < 2 * chance


class TestGenerative:
    def test_shapes(self):
        sp = gen_generative(GenerativeTaskConfig(n_train=40, n_val=10, n_test=20))
        assert sp.train.X1.shape == (40, 16) and sp.train.X2.shape == (40, 16) and sp.train.Y.shape == (40, 4)
        assert sp.test.kind == "regression"

    def test_equation_replay(self):
        cfg = GenerativeTaskConfig(d_z=3, D1=5, D2=5, K_y=2, eta=0.7, sigma2=0.3, n_train=50, seed=11)
        sp = gen_generative(cfg)
        rng = Rng(11)
        W1, W2, Wy = generative_matrices(cfg, rng.split(0))
        r = rng.split(1)
        Z = r.uniform(-2.5, 2.5, size=(50, 3))
        e1, e2, ey = r.normal((50, 5)), r.normal((50, 5)), r.normal((50, 2))
        np.testing.assert_array_equal(sp.train.X1, leaky_relu_np(Z @ W1.T) - 1.4 * np.sin(Z @ W2.T) + e1)
        np.testing.assert_array_equal(sp.train.X2, np.sin(Z @ W2.T) + 0.3 * e2)
        np.testing.assert_array_equal(sp.train.Y, Z @ Wy.T + ey)

    def test_eta_zero_drops_corruption(self):
        a = gen_generative(GenerativeTaskConfig(eta=0.0, n_train=30))
        b = gen_generative(GenerativeTaskConfig(eta=0.0, sigma2=1.0, n_train=30))
        assert np.array_equal(a.train.X1, b.train.X1)

    def test_corruption_is_scaled_x2(self):
        # with sigma2 = 0, X2 = sin(W2 Z), so X1(eta) - X1(0) = -2|eta| X2
        a = gen_generative(GenerativeTaskConfig(eta=0.0, n_train=200))
        b = gen_generative(GenerativeTaskConfig(eta=0.75, n_train=200))
        np.testing.assert_allclose(b.train.X1 - a.train.X1, -1.5 * a.train.X2, atol=1e-12)

    def test_eta_sign_irrelevant(self):
        a = gen_generative(GenerativeTaskConfig(eta=0.8, n_train=30))
        b = gen_generative(GenerativeTaskConfig(eta=-0.8, n_train=30))
        assert np.array_equal(a.train.X1, b.train.X1)

    def test_sigma2_zero_bounded(self):
        sp = gen_generative(GenerativeTaskConfig(sigma2=0.0, n_train=500))
        assert np.abs(sp.train.X2).max() <= 1.0

    def test_noise_free_replay(self):
        cfg = GenerativeTaskConfig(eta=1.0, sigma2=0.5, noise=False, n_train=80, seed=5)
        a, b = gen_generative(cfg), gen_generative(cfg)
        for x, y in ((a.train.X1, b.train.X1), (a.train.X2, b.train.X2), (a.test.Y, b.test.Y)):
            assert np.array_equal(x, y)

    def test_ols_signal(self):
        sp = gen_generative(GenerativeTaskConfig(n_train=2000, n_test=2000, seed=2))

        def design(ds):
            return np.column_stack([ds.X1, ds.X2, np.ones(len(ds))])

        coef = np.linalg.lstsq(design(sp.train), sp.train.Y, rcond=None)[0]
        resid = sp.test.Y - design(sp.test) @ coef
        r2 = 1 - (resid ** 2).sum() / ((sp.test.Y - sp.test.Y.mean(0)) ** 2).sum()
        assert r2 > 0.5

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GenerativeTaskConfig(sigma2=-0.1)
        with pytest.raises(ValueError):
            GenerativeTaskConfig(K_y=0)
        with pytest.raises(ValueError):
            GenerativeTaskConfig(D1=8, D2=6)


class TestCorrupt:
    def setup_method(self):
        self.ds = gen_generative(GenerativeTaskConfig(n_train=10, n_val=1, n_test=1)).train

    def test_zero_sigma_is_identity(self):
        out = corrupt(self.ds, 0.0, (0, 1), Rng(0))
        assert np.array_equal(out.X1, self.ds.X1) and np.array_equal(out.X2, self.ds.X2)

    def test_single_modality(self):
        out = corrupt(self.ds, 1.0, (0,), Rng(0))
        assert np.array_equal(out.X2, self.ds.X2) and not np.array_equal(out.X1, self.ds.X1)
        assert np.array_equal(out.Y, self.ds.Y)

    def test_input_not_mutated(self):
        before = self.ds.X1.copy()
        corrupt(self.ds, 2.0, (0, 1), Rng(0))
        assert np.array_equal(before, self.ds.X1)

    def test_noise_std(self):
        ds = SyntheticDataset(np.zeros((1000, 100)), np.zeros((1000, 1)), np.zeros(1000), "regression")
        out = corrupt(ds, 0.7, (0,), Rng(1))
        assert abs(out.X1.std() - 0.7) / 0.7 < 0.02

    def test_errors(self):
        with pytest.raises(ValueError):
            corrupt(self.ds, -0.1, (0,), Rng(0))
        with pytest.raises(ValueError):
            corrupt(self.ds, 0.1, (2,), Rng(0))

    def test_grid(self):
        g = NoiseSpec(1.0, 5).grid
        assert g[0] == 0.0 and np.all(np.diff(g) > 0)
        np.testing.assert_allclose(g, [0, 0.25, 0.5, 0.75, 1.0])
        with pytest.raises(ValueError):
            NoiseSpec(count=0)


class TestDataset:
    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            SyntheticDataset(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros(3), "regression")
        with pytest.raises(ValueError):
            SyntheticDataset(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), "ranking")

    def test_csv_round_trip_regression(self, tmp_path):
        ds = gen_generative(GenerativeTaskConfig(n_train=25)).train
        save_csv(ds, tmp_path / "g.csv")
        back = load_csv(tmp_path / "g.csv")
        assert back.kind == "regression"
        for a, b in ((ds.X1, back.X1), (ds.X2, back.X2), (ds.Y, back.Y)):
            np.testing.assert_allclose(a, b, rtol=1e-15, atol=0)

    def test_csv_round_trip_classification(self, tmp_path):
        ds = gen_lattice(LatticeTaskConfig(D=4, p=6, n_train=30, n_val=1, n_test=1)).train
        save_csv(ds, tmp_path / "l.csv")
        back = load_csv(tmp_path / "l.csv")
        assert back.kind == "classification" and np.array_equal(back.Y, ds.Y)
        np.testing.assert_allclose(back.X1, ds.X1, rtol=1e-15, atol=0)

    def test_csv_header(self, tmp_path):
        ds = gen_lattice(LatticeTaskConfig(D=2, p=2, n_train=3, n_val=1, n_test=1)).train
        save_csv(ds, tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "x1_0,x1_1,x2_0,x2_1,y"
