import numpy as np
import pytest

from psdlab.feature_ann import (FeatureAnn, FeatureError, FeatureMatrix, LmState, ann_predict, concat_features,
                                import_features, lm_step, lm_train, residual_jacobian, train_on_features)


def matrix(n, k, seed=0, prefix="s"):
    rng = np.random.default_rng(seed)
    return FeatureMatrix([f"{prefix}{i}" for i in range(n)], rng.normal(size=(n, k)), [f"f{j}" for j in range(k)])


class TestConcat:
    def test_widths_and_order(self):
        top, under = matrix(4, 1000, 0), matrix(4, 1000, 1)
        both = concat_features(top, under)
        assert both.shape == (4, 2000)
        assert np.array_equal(both.values[:, :1000], top.values)
        assert both.columns[0] == "T_f0" and both.columns[1000] == "U_f0"
        assert concat_features(matrix(2, 3), matrix(2, 2)).shape == (2, 5)

    def test_row_mismatch(self):
        with pytest.raises(FeatureError):
            concat_features(matrix(3, 2), matrix(4, 2))
        with pytest.raises(FeatureError):
            concat_features(matrix(3, 2), matrix(3, 2, prefix="t"))


class TestImport:
    def write(self, tmp_path, text):
        p = tmp_path / "features.csv"
        p.write_text(text)
        return p

    def test_shape(self, tmp_path):
        p = self.write(tmp_path, "sample_id,f0,f1,f2,f3\na,1,2,3,4\nb,2,3,4,5\nc,0,1,1,9\n")
        fm = import_features(p)
        assert fm.shape == (3, 4) and fm.ids == ["a", "b", "c"]

    def test_constant_column_dropped(self, tmp_path):
        p = self.write(tmp_path, "sample_id,f0,f1\na,1,7\nb,2,7\nc,3,7\n")
        fm = import_features(p)
        assert fm.columns == ["f0"] and fm.dropped == ["f1"]

    def test_standardized_on_training_rows(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.normal(3, 5, size=(20, 4))
        lines = ["sample_id,f0,f1,f2,f3"]
        lines += [f"s{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(vals)]
        p = self.write(tmp_path, "\n".join(lines) + "\n")
        train = [f"s{i}" for i in range(14)]
        fm = import_features(p, train_ids=train)
        z = fm.rows(train).standardized()
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-9)
        assert np.abs(fm.standardized().mean(axis=0)).max() > 1e-6

    def test_aligned_to_order(self, tmp_path):
        p = self.write(tmp_path, "sample_id,f0,f1\na,1,5\nb,2,3\nc,3,1\n")
        fm = import_features(p, order=["c", "a"])
        assert fm.ids == ["c", "a"] and fm.values[:, 0].tolist() == [3, 1]

    @pytest.mark.parametrize("text,match", [
        ("sample_id,f0,f1\na,1,2\nb,3\n", ":3:"),
        ("sample_id,f0\na,1\nb,x\n", ":3:"),
        ("id,f0\na,1\n", "sample_id"),
        ("", "empty"),
        ("sample_id,f0\na,1\na,2\n", "duplicate"),
    ])
    def test_errors(self, tmp_path, text, match):
        with pytest.raises(FeatureError, match=match):
            import_features(self.write(tmp_path, text))

    def test_missing_ids(self, tmp_path):
        p = self.write(tmp_path, "sample_id,f0,f1\na,1,5\nb,2,3\n")
        with pytest.raises(FeatureError, match="no features"):
            import_features(p, order=["a", "zz"])


class TestForward:
    def test_zero_weights(self):
        ann = FeatureAnn(np.zeros((3, 10)), np.zeros(10), np.zeros((10, 5)), np.arange(5.0))
        assert np.array_equal(ann_predict(ann, np.ones((2, 3))), np.tile(np.arange(5.0), (2, 1)))

    def test_hand_network(self):
        ann = FeatureAnn(np.array([[1.0]]), np.zeros(1), np.array([[2.0]]), np.array([0.5]))
        assert ann_predict(ann, [[0.0]])[0, 0] == 0.5
        assert ann_predict(ann, [[1.0]])[0, 0] == pytest.approx(2 * np.tanh(1) + 0.5)

    def test_deterministic_and_width_checked(self):
        ann = FeatureAnn.init(4, seed=3)
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(ann_predict(ann, x), ann_predict(ann, x))
        assert ann.w1.shape == (4, 10) and ann.w2.shape == (10, 5)
        assert np.abs(ann.flat()).max() <= 0.5
        with pytest.raises(FeatureError):
            ann_predict(ann, np.zeros((1, 5)))

    def test_json_round_trip(self):
        ann = FeatureAnn.init(3, seed=1)
        ann.columns, ann.mean, ann.std = ["a", "b", "c"], np.array([1.0, 2, 3]), np.array([1.0, 1, 2])
        back = FeatureAnn.from_json(ann.to_json())
        assert np.array_equal(back.flat(), ann.flat()) and back.columns == ann.columns
        fm = FeatureMatrix(["x"], [[3.0, 1.0, 2.0]], ["c", "a", "b"])
        assert np.array_equal(ann_predict(back, fm), ann_predict(ann, [[1.0, 2.0, 3.0]]))


class TestJacobian:
    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        ann = FeatureAnn.init(5, seed=0)
        x, t = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        r, jac = residual_jacobian(ann, x, t)
        w = ann.flat()
        num = np.zeros_like(jac)
        for j in range(len(w)):
            e = np.zeros_like(w)
            e[j] = 1e-6
            rp, _ = residual_jacobian(ann.with_flat(w + e), x, t)
            rm, _ = residual_jacobian(ann.with_flat(w - e), x, t)
            num[:, j] = (rp - rm) / 2e-6
        assert jac.shape == (35, 5 * 10 + 10 + 50 + 5)
        assert np.abs(jac - num).max() / np.abs(num).max() < 1e-4


class TestLmStep:
    def test_scalar_example(self):
        # y = w x with x = 1, t = 2, w = 0: residual -2, Jacobian 1
        step = lm_step(np.array([[1.0]]), np.array([-2.0]), 1.0)
        assert step[0] == pytest.approx(1.0)
        assert (1.0 * step[0] - 2.0) ** 2 == pytest.approx(1.0)

    def test_large_damping_is_gradient_descent(self):
        rng = np.random.default_rng(1)
        jac, r = rng.normal(size=(12, 6)), rng.normal(size=12)
        step = lm_step(jac, r, 1e8)
        gd = -jac.T @ r / 1e8
        assert np.linalg.norm(step - gd) / np.linalg.norm(step) < 1e-3

    def test_dual_form_matches_primal(self):
        rng = np.random.default_rng(2)
        jac, r = rng.normal(size=(4, 9)), rng.normal(size=4)
        primal = -np.linalg.solve(jac.T @ jac + 0.3 * np.eye(9), jac.T @ r)
        np.testing.assert_allclose(lm_step(jac, r, 0.3), primal, rtol=1e-10, atol=1e-12)


class TestLmTrain:
    def test_realizable_start_takes_no_steps(self):
        ann = FeatureAnn.init(3, seed=0)
        x = np.random.default_rng(0).normal(size=(8, 3))
        best, hist = lm_train(ann, x, ann.forward(x)[0])
        assert hist.sse == [0.0] and hist.stop_reason == "zero residual"
        assert np.array_equal(best.flat(), ann.flat())

    def test_sse_strictly_decreasing(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 4))
        t = np.sin(x[:, :1] + x[:, 1:2]) * np.arange(1, 6) + 0.1 * rng.normal(size=(40, 5))
        _, hist = lm_train(FeatureAnn.init(4, seed=3), x, t, state=LmState(max_iter=60))
        assert len(hist.sse) > 5
        assert all(b < a for a, b in zip(hist.sse, hist.sse[1:]))

    def test_returns_best_validation(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(60, 6))
        t = x[:, :5] * 3 + rng.normal(size=(60, 5))
        xv = rng.normal(size=(20, 6))
        tv = xv[:, :5] * 3 + rng.normal(size=(20, 5))
        best, hist = lm_train(FeatureAnn.init(6, seed=4), x, t, xv, tv, LmState(max_iter=200))
        got = np.sqrt(np.mean((best.forward(xv)[0] - tv) ** 2))
        assert got == pytest.approx(min(hist.val_rmse), rel=1e-12)
        assert hist.stop_reason in {"validation patience", "max iterations", "gradient below threshold",
                                    "damping limit"}

    def test_validation_patience(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(60, 8))
        t = x[:, :5] + rng.normal(size=(60, 5))
        xv = rng.normal(size=(30, 8))
        tv = xv[:, :5] + rng.normal(size=(30, 5))
        _, hist = lm_train(FeatureAnn.init(8, seed=5), x, t, xv, tv, LmState(max_iter=500, patience=6))
        assert hist.stop_reason == "validation patience"
        increases = [b > a for a, b in zip(hist.val_rmse, hist.val_rmse[1:])]
        assert increases[-6:] == [True] * 6

    def test_state_validation(self):
        with pytest.raises(ValueError):
            LmState(increase=0.5)
        with pytest.raises(ValueError):
            LmState(mu=0)

    def test_train_on_features(self):
        fm = matrix(200, 3, seed=6)
        targets = {s: list(np.tanh(v[:1]).repeat(5) * 10 + 50) for s, v in zip(fm.ids, fm.values)}
        splits = {s: ("train" if i < 140 else "val" if i < 170 else "test") for i, s in enumerate(fm.ids)}
        ann, hist = train_on_features(fm, targets, splits, seed=0, state=LmState(max_iter=50))
        assert ann.columns == ["f0", "f1", "f2"] and ann.mean is not None
        pred = ann_predict(ann, fm.rows(fm.ids[170:]))
        truth = np.array([targets[s] for s in fm.ids[170:]])
        assert np.sqrt(np.mean((pred - truth) ** 2)) < 1.0
