import numpy as np
import pytest

from rpf.errors import FormatError, ValidationError
from rpf.dataset import SamplingConfig, generate_dataset
from rpf.neural import (
    LinearFeatures,
    MlpFeatures,
    Normalizer,
    TrainConfig,
    fit_linear,
    input_jacobian,
    load_model,
    predict,
    predict_residual_and_grad,
    save_model,
    train,
    train_arrays,
)
from rpf import bim
from rpf.residual import (
    ControlLayout,
    VoltageState,
    assemble_residual,
    residual_jacobian,
    residual_norm,
)

from conftest import fd_jacobian, assert_close


@pytest.fixture(scope="module")
def ds30(net9):
    return generate_dataset(net9, SamplingConfig(30, 11))


@pytest.fixture(scope="module")
def linear_model(net9, ds30):
    solver, report = train(net9, ds30, TrainConfig(features="linear"))
    return solver, report


@pytest.fixture(scope="module")
def mlp_model(net9, ds30):
    cfg = TrainConfig(features="mlp", widths=(16, 16), max_epochs=500,
                      seed=0, patience=500)
    solver, report = train(net9, ds30, cfg)
    return solver, report


def test_normalizer_floors_constant_columns():
    X = np.column_stack([np.linspace(0, 1, 8), np.full(8, 3.0)])
    Y = np.column_stack([np.linspace(-1, 1, 8)])
    nm = Normalizer.from_data(X, Y)
    assert nm.u_scale[1] == pytest.approx(1e-8)
    xn = nm.norm_u(X)
    assert np.all(np.isfinite(xn))
    assert nm.denorm_v(nm.norm_v(Y)) == pytest.approx(Y)


def test_mlp_backward_matches_fd():
    rng = np.random.default_rng(0)
    fm = MlpFeatures(4, widths=(5, 6))
    fm.init_params(rng)
    theta0 = fm.pack()
    X = rng.normal(size=(7, 4))
    dPhi = rng.normal(size=(7, fm.n_features))

    fm.unpack(theta0)
    _, cache = fm.forward(X, want_cache=True)
    grads = fm.backward(cache, dPhi)
    got = np.concatenate([g.ravel() for g in grads])

    def scalar(theta):
        fm.unpack(theta)
        phi = fm.forward(X)
        return float(np.sum(phi * dPhi))

    fd = np.zeros_like(theta0)
    eps = 1e-6
    for k in range(theta0.size):
        d = np.zeros_like(theta0)
        d[k] = eps
        fd[k] = (scalar(theta0 + d) - scalar(theta0 - d)) / (2 * eps)
    fm.unpack(theta0)
    assert_close(got, fd, 1e-7, "mlp parameter gradient")


def test_feature_input_jacobians_fd():
    rng = np.random.default_rng(1)
    for fm in (LinearFeatures(5), MlpFeatures(5, widths=(8, 8))):
        if isinstance(fm, MlpFeatures):
            fm.init_params(rng)
        x = rng.normal(size=5)
        J = fm.input_jacobian(x)
        Jfd = fd_jacobian(lambda z: fm.forward(z[None, :])[0], x)
        assert_close(J, Jfd, 1e-7, f"{type(fm).__name__} input jacobian")


def test_fit_linear_exact_on_linear_data():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 6))
    W = rng.normal(size=(6, 3))
    b = rng.normal(size=3)
    Y = X @ W + b
    A, nm, rank = fit_linear(X, Y)
    assert rank == 7
    pred = nm.denorm_v(np.hstack([np.ones((40, 1)), nm.norm_u(X)]) @ A.T)
    assert_close(pred, Y, 1e-9, "linear exactness")


def test_fit_linear_first_order_optimality():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 4))
    Y = rng.normal(size=(50, 2))  # no linear structure at all
    A, nm, _ = fit_linear(X, Y)
    Phi = np.hstack([np.ones((50, 1)), nm.norm_u(X)])
    resid = Phi @ A.T - nm.norm_v(Y)
    # normal equations: feature-space gradient vanishes at the solution
    assert_close(Phi.T @ resid, np.zeros((5, 2)), 1e-10, "normal equations")


def test_train_linear_reports_rank(net9, linear_model):
    solver, report = linear_model
    assert report.optimizer == "lstsq"
    assert report.status == "fit"
    assert solver.kind == "linear"
    # 12 controls + bias minus the 3 v_ref-tied duplicates... rank is data
    # dependent; it can never exceed the feature count
    assert 1 <= report.rank <= 13


def test_predictions_have_state_shape(net9, linear_model, ds30):
    solver, _ = linear_model
    rec = ds30.records[0]
    v = predict(solver, rec.u)
    assert isinstance(v, VoltageState)
    assert v.magnitudes.shape == (9,)
    assert v.branch_angles.shape == (9,)
    err = np.abs(v.to_vector() - rec.v_star.to_vector())
    assert np.max(err) < 0.2


def test_mlp_training_decreases_loss(mlp_model):
    _, report = mlp_model
    assert report.train_curve[0] > report.final_train
    assert report.epochs <= 500
    assert report.status in ("converged", "max_iter", "early_stop")
    assert len(report.train_curve) == len(report.val_curve) == report.epochs


def test_best_epoch_selection(mlp_model):
    """The returned parameters belong to the epoch with the lowest
    validation score."""
    _, report = mlp_model
    assert 1 <= report.best_epoch <= report.epochs
    assert report.val_curve[report.best_epoch - 1] == min(report.val_curve)


def test_training_is_deterministic(net9, ds30):
    cfg = TrainConfig(features="mlp", widths=(8, 8), max_epochs=40, seed=4)
    a, ra = train(net9, ds30, cfg)
    b, rb = train(net9, ds30, cfg)
    assert np.array_equal(a.a_matrix, b.a_matrix)
    assert ra.train_curve == rb.train_curve
    c, _ = train(net9, ds30, TrainConfig(features="mlp", widths=(8, 8),
                                         max_epochs=40, seed=5))
    assert not np.array_equal(a.a_matrix, c.a_matrix)


def test_model_input_jacobian_fd(net9, mlp_model, ds30):
    solver, _ = mlp_model
    rng = np.random.default_rng(5)
    worst = 0.0
    for rec in ds30.records[:5]:
        u = rec.u * rng.uniform(0.98, 1.02, rec.u.shape)
        J = input_jacobian(solver, u)
        Jfd = fd_jacobian(lambda z: predict(solver, z).to_vector(), u)
        worst = max(worst, float(np.max(np.abs(J - Jfd))))
    assert worst <= 1e-5, f"model jacobian fd gap {worst:.2e}"


def test_predict_residual_grad_fd(net9, mlp_model, ds30):
    solver, _ = mlp_model
    for rec in ds30.records[:5]:
        rho, grad = predict_residual_and_grad(solver, net9, rec.u)
        assert rho >= 0

        def f(z):
            v = predict(solver, z)
            return residual_norm(assemble_residual(net9, v, z))

        gfd = fd_jacobian(lambda z: np.array([f(z)]), rec.u)[0]
        assert_close(grad, gfd, 1e-5, "rho gradient")


def test_predict_residual_grad_subset(net9, mlp_model, ds30):
    solver, _ = mlp_model
    layout = ControlLayout.for_network(net9)
    idx = np.array(layout.gen_p_m)
    rec = ds30.records[3]
    rho_full, grad_full = predict_residual_and_grad(solver, net9, rec.u)
    rho_sub, grad_sub = predict_residual_and_grad(solver, net9, rec.u,
                                                  indices=idx)
    assert rho_sub == rho_full
    assert_close(grad_sub, grad_full[idx], 1e-12, "gradient subset")


def test_checkpoint_roundtrip(tmp_path, mlp_model, net9, ds30):
    solver, _ = mlp_model
    p = tmp_path / "model.json"
    save_model(solver, p)
    back = load_model(p)
    rec = ds30.records[0]
    assert np.array_equal(predict(back, rec.u).to_vector(),
                          predict(solver, rec.u).to_vector())
    assert back.meta["dataset_fingerprint"] == solver.meta["dataset_fingerprint"]


def test_checkpoint_rejects_unknown_format(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "other-model-v9"}')
    with pytest.raises(FormatError):
        load_model(p)


def test_adam_fallback_path(net9, ds30):
    cfg = TrainConfig(features="mlp", widths=(8, 8), max_epochs=30,
                      optimizer="adam", seed=0)
    solver, report = train(net9, ds30, cfg)
    assert report.optimizer == "adam"
    assert report.final_train < report.train_curve[0]


# bus-type encoding ---------------------------------------------------------


@pytest.fixture(scope="module")
def bim_parts(net9, ds30):
    X, Y, enc = bim.bim_transform(ds30, net9)
    return X, Y, enc


def test_bim_encoding_structure(net9, bim_parts):
    X, Y, enc = bim_parts
    assert enc.slack_bus == 0
    assert enc.pv_buses == (1, 2)
    assert len(enc.pq_buses) == 6
    assert X.shape[1] == 18
    assert Y.shape[1] == 14


def test_bim_decode_roundtrip(net9, ds30, bim_parts):
    X, Y, enc = bim_parts
    layout = ControlLayout.for_network(net9)
    for i, rec in enumerate(ds30.records[:8]):
        v = bim.decode(enc, net9, X[i], Y[i])
        assert_close(v.magnitudes, rec.v_star.magnitudes, 1e-9, "mags")
        assert_close(v.branch_angles, rec.v_star.branch_angles, 1e-9, "angles")


def test_bim_zero_mask(net9, bim_parts):
    _, _, enc = bim_parts
    mask = bim.zero_mask(enc, net9)
    from rpf.residual import residual_labels
    labels = np.array(residual_labels(net9))
    want = {"re_kcl_bus1", "im_kcl_bus1", "im_kcl_bus2", "im_kcl_bus3",
            "kvl_cycle0"}
    assert set(labels[mask]) == want
    assert bim.nonzero_count(enc, net9) == 14


def test_bim_patched_residual_zeros(net9, ds30, bim_parts):
    """Noisy predictions still hit exact zeros at the compensated rows."""
    X, Y, enc = bim_parts
    rng = np.random.default_rng(6)
    layout = ControlLayout.for_network(net9)
    mask = bim.zero_mask(enc, net9)
    for i in (0, 4, 9):
        y_noisy = Y[i] + rng.normal(scale=1e-2, size=Y[i].shape)
        v = bim.decode(enc, net9, X[i], y_noisy)
        r, u_hat = bim.bim_residual(enc, net9, v, ds30.records[i].u, layout)
        assert np.max(np.abs(r[mask])) <= 1e-13
        assert np.max(np.abs(r[~mask])) > 1e-6


def test_bim_train_and_predict(net9, ds30):
    cfg = TrainConfig(features="linear")
    solver, report, enc = bim.train_bim(net9, ds30, cfg)
    assert solver.meta["formulation"] == "bim"
    X, Y, _ = bim.bim_transform(ds30, net9, enc)
    v = bim.predict_bim(solver, net9, X[0])
    assert isinstance(v, VoltageState)
    # rpf-style prediction entry point refuses the bus-type model
    with pytest.raises(ValidationError):
        predict(solver, ds30.records[0].u)
