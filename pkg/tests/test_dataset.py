import numpy as np
import pytest

from rpf.errors import FingerprintMismatch, FormatError, GenerationError
from rpf.dataset import (
    SamplingConfig,
    dataset_columns,
    generate_dataset,
    load_dataset,
    rescale_to_lossless,
    sample_oc,
    save_dataset,
)
from rpf.residual import ControlLayout, assemble_residual, residual_norm

from conftest import make_two_bus


def test_sample_ranges(net9, layout9):
    cfg = SamplingConfig(1, 0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        u = sample_oc(rng, net9, cfg)
        p = u[layout9.load_p]
        q = u[layout9.load_q]
        s = np.hypot(p, q).sum()
        assert 1.0 <= s <= 4.0 + 1e-12
        assert np.all(p >= 0) and np.all(q >= 0)
        # per-load power factor inside the configured band
        pf = p / np.hypot(p, q)
        assert np.all(pf >= 0.9 - 1e-12)
        vr = u[layout9.gen_v_ref]
        assert np.all((1.0 <= vr) & (vr <= 1.05))
        # feasible mode samples generation equal to demand scale
        assert u[layout9.gen_p_m].sum() == pytest.approx(s)


def test_sample_infeasible_scales_generation(net9, layout9):
    cfg = SamplingConfig(1, 0, mode="infeasible", gen_scale_range=(1.3, 1.4))
    rng = np.random.default_rng(1)
    u = sample_oc(rng, net9, cfg)
    s = np.hypot(u[layout9.load_p], u[layout9.load_q]).sum()
    ratio = u[layout9.gen_p_m].sum() / s
    assert 1.3 <= ratio <= 1.4


def test_generate_feasible_records(net9):
    ds = generate_dataset(net9, SamplingConfig(25, 3))
    assert len(ds) == 25
    assert all(rec.feasible for rec in ds.records)
    for rec in ds.records:
        assert rec.rho <= 1e-10
        r = assemble_residual(net9, rec.v_star, rec.u)
        assert residual_norm(r) <= 1e-10


def test_generate_infeasible_records(net9):
    ds = generate_dataset(net9, SamplingConfig(25, 3, stream=2, mode="infeasible"))
    assert len(ds) == 25
    rho = np.array([rec.rho for rec in ds.records])
    assert np.all(rho >= 0)
    assert np.any(rho > 1e-6), "surplus sampling should miss balance"
    for rec in ds.records:
        assert rec.feasible == (rec.rho <= 1e-10)


def test_generate_thread_invariance(net9):
    a = generate_dataset(net9, SamplingConfig(16, 5), threads=1)
    b = generate_dataset(net9, SamplingConfig(16, 5), threads=4)
    Ua, Va, ra, _ = a.to_arrays()
    Ub, Vb, rb, _ = b.to_arrays()
    assert np.array_equal(Ua, Ub)
    assert np.array_equal(Va, Vb)
    assert np.array_equal(ra, rb)


def test_streams_decorrelate(net9):
    a = generate_dataset(net9, SamplingConfig(8, 5, stream=0))
    b = generate_dataset(net9, SamplingConfig(8, 5, stream=1))
    assert not np.array_equal(a.to_arrays()[0], b.to_arrays()[0])


def test_columns_cover_controls_state_and_flags(net9, layout9):
    cols = dataset_columns(net9)
    assert len(cols) == layout9.size + 18 + 2
    assert cols[0] == "p_load_bus5"
    assert cols[-2:] == ("rho", "feasible")
    assert "v_bus1" in cols and "phi_bus7_bus8" in cols


def test_save_load_roundtrip(tmp_path, net9):
    ds = generate_dataset(net9, SamplingConfig(12, 9))
    p = tmp_path / "ds.csv"
    save_dataset(ds, p)
    back = load_dataset(p, net9)
    assert len(back) == 12
    U0, V0, r0, f0 = ds.to_arrays()
    U1, V1, r1, f1 = back.to_arrays()
    assert np.array_equal(U0, U1)
    assert np.array_equal(V0, V1)
    assert np.array_equal(r0, r1)
    assert np.array_equal(f0, f1)
    assert back.config["seed"] == 9


def test_load_rejects_other_network(tmp_path, net9):
    ds = generate_dataset(net9, SamplingConfig(3, 0))
    p = tmp_path / "ds.csv"
    save_dataset(ds, p)
    with pytest.raises(FingerprintMismatch):
        load_dataset(p, make_two_bus())


def test_load_rejects_tampered_rho(tmp_path, net9):
    ds = generate_dataset(net9, SamplingConfig(3, 0))
    p = tmp_path / "ds.csv"
    save_dataset(ds, p)
    lines = p.read_text().splitlines()
    parts = lines[2].split(",")
    parts[-2] = "0.5"  # stored rho no longer matches the stored state
    lines[2] = ",".join(parts)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="rho"):
        load_dataset(p, net9)


def test_load_rejects_missing_header(tmp_path, net9):
    p = tmp_path / "ds.csv"
    p.write_text("just,a,csv\n1,2,3\n")
    with pytest.raises(FormatError):
        load_dataset(p, net9)


def test_rescale_to_lossless(net9, layout9):
    rng = np.random.default_rng(2)
    u = sample_oc(rng, net9, SamplingConfig(1, 0, mode="infeasible"))
    out = rescale_to_lossless(u, layout9)
    assert out[layout9.gen_p_m].sum() == pytest.approx(out[layout9.load_p].sum())
    # untouched entries stay put
    assert np.array_equal(out[layout9.load_p], u[layout9.load_p])
    assert np.array_equal(out[layout9.gen_v_ref], u[layout9.gen_v_ref])
    bad = u.copy()
    bad[layout9.gen_p_m] = 0.0
    with pytest.raises(FormatError):
        rescale_to_lossless(bad, layout9)


def test_generation_error_on_heavy_dropping(net9):
    cfg = SamplingConfig(10, 0, mode="feasible", s_range=(40.0, 45.0))
    with pytest.raises(GenerationError):
        generate_dataset(net9, cfg)
