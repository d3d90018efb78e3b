"""Command-line pipeline: generate datasets, train models, evaluate them,
run the control-adjustment tasks and export figures.

Option precedence: explicit flags beat a --config JSON file, which beats the
RPF_THREADS / RPF_OUT_DIR environment variables, which beat built-in
defaults. Exit codes: 0 success, 1 usage problem (bad flags, missing input
file), 2 runtime failure. Output files are byte-stable for a given seed and
configuration: provenance headers carry content fingerprints and semantic
options only, never paths or timestamps (timings go to stdout).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import bim as bim_mod
from . import neural, po
from .dataset import (
    Dataset,
    SamplingConfig,
    generate_dataset,
    load_dataset,
    rescale_to_lossless,
    sample_oc,
    save_dataset,
)
from .errors import (
    FingerprintMismatch,
    NonDescent,
    NotConverged,
    RpfError,
    ValidationError,
)
from .network import (
    case9,
    load_injector_config,
    load_network,
    network_fingerprint,
)
from .residual import (
    ControlLayout,
    SlackSpec,
    assemble_residual,
    residual_labels,
    residual_norm,
)
from .solver import SolverConfig, solve_feasible
from .neural import load_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(f"{self.prog}: {message}")


ENV_VARS = {"RPF_THREADS": ("threads", int), "RPF_OUT_DIR": ("out_dir", str)}


def merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > environment > defaults."""
    cfg = dict(defaults)
    for env_name, (key, conv) in ENV_VARS.items():
        if key in cfg and os.environ.get(env_name):
            try:
                cfg[key] = conv(os.environ[env_name])
            except ValueError:
                raise UsageError(f"bad value for {env_name}: {os.environ[env_name]!r}")
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in file_cfg.items():
            key = k.replace("-", "_")
            if key not in cfg:
                raise UsageError(f"unknown config key {k!r}")
            cfg[key] = v
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def provenance(command: str, options: dict, inputs: dict) -> dict:
    options = {k: options[k] for k in sorted(options)}
    blob = json.dumps(options, sort_keys=True, separators=(",", ":"))
    return {
        "tool": "rpf",
        "version": __version__,
        "command": command,
        "options": options,
        "options_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
        "inputs": {k: inputs[k] for k in sorted(inputs)},
    }


def write_csv(path, header: dict, columns: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True,
                                   separators=(",", ":")) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _pmap(fn, items, threads: int):
    """Ordered map, optionally across a thread pool."""
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _ensure_out_dir(cfg) -> str:
    out = cfg["out_dir"] or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_net(cfg):
    injector_params = None
    if cfg.get("injector_config"):
        injector_params = load_injector_config(cfg["injector_config"])
    if cfg.get("network"):
        return load_network(cfg["network"], injector_params)
    return case9(injector_params)


def _model_inputs(model_path) -> dict:
    return {"model_sha256": _sha256_file(model_path)}


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg = merge_config(args, {
        "network": None, "injector_config": None, "out_dir": ".",
        "seed": 0, "threads": 1, "n_train": 2000, "n_test": 1000,
        "n_train_infeasible": 0,
    })
    net = _load_net(cfg)
    out = _ensure_out_dir(cfg)
    threads = int(cfg["threads"])
    jobs = [("train.csv", SamplingConfig(int(cfg["n_train"]), int(cfg["seed"]),
                                         stream=0, mode="feasible")),
            ("test_feasible.csv", SamplingConfig(int(cfg["n_test"]), int(cfg["seed"]),
                                                 stream=1, mode="feasible")),
            ("test_infeasible.csv", SamplingConfig(int(cfg["n_test"]), int(cfg["seed"]),
                                                   stream=2, mode="infeasible"))]
    if int(cfg["n_train_infeasible"]) > 0:
        jobs.append(("train_infeasible.csv",
                     SamplingConfig(int(cfg["n_train_infeasible"]), int(cfg["seed"]),
                                    stream=3, mode="infeasible")))
    report_files = {}
    for fname, scfg in jobs:
        t0 = time.perf_counter()
        ds = generate_dataset(net, scfg, threads=threads)
        save_dataset(ds, os.path.join(out, fname))
        dt = time.perf_counter() - t0
        report_files[fname] = {"n": len(ds), "n_dropped": ds.n_dropped,
                               "mode": scfg.mode, "stream": scfg.stream}
        print(f"{fname}: {len(ds)} records ({ds.n_dropped} dropped) in {dt:.1f}s")
    report = provenance("gen", {
        "seed": int(cfg["seed"]), "n_train": int(cfg["n_train"]),
        "n_test": int(cfg["n_test"]),
        "n_train_infeasible": int(cfg["n_train_infeasible"]),
    }, {"network_fingerprint": network_fingerprint(net)})
    report["files"] = report_files
    with open(os.path.join(out, "gen_report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = merge_config(args, {
        "network": None, "injector_config": None, "out_dir": ".",
        "seed": 0, "threads": 1, "dataset": "train.csv",
        "features": "mlp", "epochs": 6000, "val_fraction": 0.1,
        "patience": 200, "optimizer": "lbfgs", "formulation": "rpf",
        "model_out": "model.json", "widths": "100,100",
    })
    net = _load_net(cfg)
    out = _ensure_out_dir(cfg)
    ds = load_dataset(cfg["dataset"], net)
    try:
        widths = tuple(int(w) for w in str(cfg["widths"]).split(","))
    except ValueError:
        raise UsageError(f"bad --widths {cfg['widths']!r} (want e.g. 100,100)")
    if cfg["features"] == "mlp" and len(widths) != 2:
        raise UsageError("--widths takes two comma-separated layer sizes")
    tc = neural.TrainConfig(
        features=cfg["features"], widths=widths, max_epochs=int(cfg["epochs"]),
        optimizer=cfg["optimizer"], seed=int(cfg["seed"]),
        val_fraction=float(cfg["val_fraction"]), patience=int(cfg["patience"]),
    )
    if cfg["formulation"] == "rpf":
        model, report = neural.train(net, ds, tc)
    elif cfg["formulation"] == "bim":
        model, report, _ = bim_mod.train_bim(net, ds, tc)
    else:
        raise UsageError(f"unknown formulation {cfg['formulation']!r}")
    model_path = os.path.join(out, cfg["model_out"])
    neural.save_model(model, model_path)
    curve_header = provenance("train", {
        "features": cfg["features"], "epochs": int(cfg["epochs"]),
        "seed": int(cfg["seed"]), "val_fraction": float(cfg["val_fraction"]),
        "patience": int(cfg["patience"]), "optimizer": cfg["optimizer"],
        "formulation": cfg["formulation"], "widths": list(widths),
    }, {"dataset_fingerprint": ds.network_fingerprint})
    rows = [(i, tl, vl) for i, (tl, vl) in
            enumerate(zip(report.train_curve, report.val_curve), start=1)]
    write_csv(os.path.join(out, "train_curve.csv"), curve_header,
              ["epoch", "train_loss", "val_loss"], rows)
    print(f"trained {cfg['features']} ({cfg['formulation']}) in "
          f"{report.wall_time_s:.1f}s: epochs={report.epochs} "
          f"final_train={report.final_train:.3e} final_val={report.final_val:.3e} "
          f"status={report.status}")
    if report.rank is not None:
        print(f"least-squares rank: {report.rank}")
    if report.status == "aborted_non_finite":
        print("training aborted: objective became non-finite", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# eval


def _check_fingerprint(model, ds: Dataset):
    want = model.meta.get("dataset_fingerprint")
    if want and want != ds.network_fingerprint:
        raise FingerprintMismatch(
            "model was trained on a different network "
            f"({want[:12]}... vs {ds.network_fingerprint[:12]}...)")


def _eval_records(model, net, ds: Dataset, layout: ControlLayout):
    """Per-record voltage errors and residual entries for one model."""
    labels_v = ([f"v_{b.name}" for b in net.buses] +
                [f"phi_br{br.index + 1}" for br in net.branches])
    r_labels = residual_labels(net)
    formulation = model.meta.get("formulation", "rpf")
    if formulation == "bim":
        enc = bim_mod.BimEncoding.from_meta(model.meta["encoding"])
        mask = bim_mod.zero_mask(enc, net)
    else:
        enc = None
        mask = np.zeros(len(r_labels), dtype=bool)
    nonzero = max(int((~mask).sum()), 1)
    v_err_rows, res_rows = [], []
    for i, rec in enumerate(ds.records):
        if enc is not None:
            x, _ = bim_mod.encode(enc, net, rec.u, rec.v_star, layout,
                                  kvl_tol=np.inf)
            v_hat = bim_mod.predict_bim(model, net, x)
            r, _ = bim_mod.bim_residual(enc, net, v_hat, rec.u, layout)
        else:
            v_hat = neural.predict(model, rec.u)
            r = assemble_residual(net, v_hat, rec.u)
        err = np.abs(v_hat.to_vector() - rec.v_star.to_vector())
        v_err_rows.extend((i, lab, e) for lab, e in zip(labels_v, err))
        res_rows.extend((i, bim_mod.residual_group(lab), lab, abs(val))
                        for lab, val in zip(r_labels, r))
        res_rows.append((i, "summary", "rho", residual_norm(r)))
        res_rows.append((i, "summary", "mean_abs",
                         float(np.abs(r[~mask]).sum() / nonzero)))
    return labels_v, v_err_rows, res_rows, mask


def _metric_rows(net, tag, ds, v_err_rows, res_rows, mask):
    r_labels = residual_labels(net)
    n_bus = net.n_bus
    v_vals = np.array([row[2] for row in v_err_rows]).reshape(len(ds), -1)
    rows = [(tag, "n_test", float(len(ds)))]
    if len(ds) == 0:
        return rows
    rows.append((tag, "median_abs_v", float(np.median(v_vals[:, :n_bus]))))
    rows.append((tag, "median_abs_phi", float(np.median(v_vals[:, n_bus:]))))
    rho = np.array([r[3] for r in res_rows if r[2] == "rho"])
    mean_abs = np.array([r[3] for r in res_rows if r[2] == "mean_abs"])
    rows.append((tag, "median_rho", float(np.median(rho))))
    rows.append((tag, "median_mean_abs_residual", float(np.median(mean_abs))))
    im_idx = np.array([lab.startswith("im_kcl") for lab in r_labels])
    share = float(mask[im_idx].sum() / max(im_idx.sum(), 1))
    rows.append((tag, "zero_share_im_kcl", share))
    rows.append((tag, "zero_count", float(mask.sum())))
    return rows


def cmd_eval(args) -> int:
    cfg = merge_config(args, {
        "network": None, "injector_config": None, "out_dir": ".",
        "threads": 1, "model": "model.json", "model_b": None,
        "test": "test_feasible.csv", "test_infeasible": None, "svg": False,
    })
    net = _load_net(cfg)
    out = _ensure_out_dir(cfg)
    layout = ControlLayout.for_network(net)
    ds = load_dataset(cfg["test"], net)
    models = [("a", cfg["model"])]
    if cfg["model_b"]:
        models.append(("b", cfg["model_b"]))
    inputs = {"dataset_fingerprint": ds.network_fingerprint}
    all_v_rows, all_res_rows, summary_rows = [], [], []
    per_model = {}
    for tag, path in models:
        model = load_model(path)
        _check_fingerprint(model, ds)
        inputs[f"model_{tag}_sha256"] = _sha256_file(path)
        labels_v, v_rows, res_rows, mask = _eval_records(model, net, ds, layout)
        all_v_rows.extend((oc, tag, lab, val) for oc, lab, val in v_rows)
        all_res_rows.extend((oc, tag, grp, lab, val)
                            for oc, grp, lab, val in res_rows)
        summary_rows.extend(_metric_rows(net, tag, ds, v_rows, res_rows, mask))
        per_model[tag] = (model, v_rows, res_rows)
    if len(models) == 2 and len(ds):
        for metric in ("median_abs_v", "median_abs_phi", "median_rho"):
            a = next(v for t, m, v in summary_rows if t == "a" and m == metric)
            b = next(v for t, m, v in summary_rows if t == "b" and m == metric)
            summary_rows.append(("a_over_b", metric,
                                 a / b if b else float("inf")))
    options = {"test": os.path.basename(cfg["test"]), "models": len(models)}
    header = provenance("eval", options, inputs)
    write_csv(os.path.join(out, "errors_voltage.csv"), header,
              ["oc", "model", "variable", "abs_error"], all_v_rows)
    write_csv(os.path.join(out, "errors_residuals.csv"), header,
              ["oc", "model", "group", "label", "value"], all_res_rows)

    if cfg["test_infeasible"]:
        ds_inf = load_dataset(cfg["test_infeasible"], net)
        comp_rows = []
        for tag, path in models:
            model = per_model[tag][0]
            for set_name, dset in (("feasible", ds), ("infeasible", ds_inf)):
                errs = []
                for rec in dset.records:
                    if model.meta.get("formulation") == "bim":
                        continue
                    rho_hat, _ = neural.predict_residual_and_grad(
                        model, net, rec.u)
                    errs.append(abs(rho_hat - rec.rho))
                if errs:
                    comp_rows.append((tag, set_name, "median_abs_rho_err",
                                      float(np.median(errs))))
                    comp_rows.append((tag, set_name, "mean_abs_rho_err",
                                      float(np.mean(errs))))
        write_csv(os.path.join(out, "infeasible_comparison.csv"), header,
                  ["model", "test_set", "metric", "value"], comp_rows)
    write_csv(os.path.join(out, "summary.csv"), header,
              ["model", "metric", "value"], summary_rows)
    for tag, metric, value in summary_rows:
        print(f"{tag} {metric} = {value:.6g}")

    if cfg["svg"] and len(ds):
        from . import plotting
        tag, (model, v_rows, res_rows) = next(iter(per_model.items()))
        v_arr = np.array([r[2] for r in v_rows]).reshape(len(ds), -1)
        groups = {"V": v_arr[:, :net.n_bus].ravel(),
                  "phi": v_arr[:, net.n_bus:].ravel()}
        plotting.box_plot(groups, os.path.join(out, "errors_voltage.svg"),
                          ylabel="abs error (pu)", title="prediction error",
                          log=True)
        res_groups = {}
        for oc, grp, lab, val in res_rows:
            if grp != "summary":
                res_groups.setdefault(grp, []).append(val)
        plotting.box_plot(res_groups, os.path.join(out, "errors_residuals.svg"),
                          ylabel="|residual|", title="residual distribution",
                          log=True)
    return 0


# ---------------------------------------------------------------------------
# po tasks


def _parse_slack(text: str, n_gen: int) -> tuple[str, SlackSpec]:
    if text == "distributed":
        return "distributed", SlackSpec.distributed(np.full(n_gen, 1.0 / n_gen))
    if text.startswith("gen"):
        try:
            k = int(text[3:]) - 1
        except ValueError:
            raise UsageError(f"bad slack spec {text!r}")
        if not 0 <= k < n_gen:
            raise UsageError(f"no generator {text!r}")
        return text, SlackSpec.single(k, n_gen)
    raise UsageError(f"bad slack spec {text!r} (genN or distributed)")


def _predictor_for(cfg, net):
    """(tag, predictor, inputs dict) honoring --oracle."""
    if cfg["oracle"]:
        return "oracle", po.ExactPredictor(net), {}
    model = load_model(cfg["model"])
    if model.meta.get("formulation", "rpf") != "rpf":
        raise ValidationError("control tasks need a voltage-predicting model")
    return "model", po.NeuralPredictor(model, net), _model_inputs(cfg["model"])


def cmd_pf(args) -> int:
    cfg = merge_config(args, {
        "network": None, "injector_config": None, "out_dir": ".",
        "seed": 0, "threads": 1, "model": "model.json", "oracle": False,
        "n": 500, "slack": "gen1",
    })
    net = _load_net(cfg)
    out = _ensure_out_dir(cfg)
    layout = ControlLayout.for_network(net)
    slack_tag, slack = _parse_slack(str(cfg["slack"]), len(net.generators))
    pred_tag, predictor, inputs = _predictor_for(cfg, net)
    scfg = SamplingConfig(int(cfg["n"]), int(cfg["seed"]), stream=10)

    def one(j):
        rng = np.random.default_rng([scfg.seed, scfg.stream, j])
        u0 = rescale_to_lossless(sample_oc(rng, net, scfg), layout)
        try:
            truth = solve_feasible(net, u0, slack)
            s_star = truth.slack_value
        except RpfError:
            return (j, float("nan"), float("nan"), float("nan"),
                    float("nan"), 0, "truth_failed")
        try:
            res = po.solve_po_pf(predictor, net, u0, slack, layout)
            s_hat = res.aux["slack_value"]
            return (j, s_hat, s_star, abs(s_hat - s_star), res.rho_hat,
                    res.iterations, "ok")
        except (NotConverged, NonDescent, RpfError) as exc:
            return (j, float("nan"), s_star, float("nan"), float("nan"), 0,
                    type(exc).__name__)

    t0 = time.perf_counter()
    rows = _pmap(one, range(int(cfg["n"])), int(cfg["threads"]))
    print(f"pf: {len(rows)} OCs in {time.perf_counter() - t0:.1f}s")
    header = provenance("pf", {
        "n": int(cfg["n"]), "seed": int(cfg["seed"]), "slack": slack_tag,
        "predictor": pred_tag,
    }, {"network_fingerprint": network_fingerprint(net), **inputs})
    path = os.path.join(out, f"pf_{slack_tag}.csv")
    write_csv(path, header,
              ["oc", "s_hat", "s_star", "abs_error", "rho_hat", "iterations",
               "status"], rows)
    ok = [r for r in rows if r[6] == "ok"]
    if ok:
        med = float(np.median([r[3] for r in ok]))
        print(f"median |s_hat - s_star| = {med:.3e} over {len(ok)} solved")
    return 0


def cmd_qss(args) -> int:
    cfg = merge_config(args, {
        "network": None, "injector_config": None, "out_dir": ".",
        "seed": 0, "threads": 1, "model": "model.json", "oracle": False,
        "n": 500, "droop_r": 0.04,
    })
    net = _load_net(cfg)
    out = _ensure_out_dir(cfg)
    layout = ControlLayout.for_network(net)
    droop = po.DroopConfig.for_network(net, r=float(cfg["droop_r"]))
    pred_tag, predictor, inputs = _predictor_for(cfg, net)
    scfg = SamplingConfig(int(cfg["n"]), int(cfg["seed"]), stream=11,
                          mode="infeasible")
    slack = SlackSpec.single(0, len(net.generators))

    def one(j):
        rng = np.random.default_rng([scfg.seed, scfg.stream, j])
        u0 = sample_oc(rng, net, scfg)
        loading = float(u0[np.array(layout.load_p)].sum())
        try:
            truth = solve_feasible(net, u0, slack)
            s_star = truth.slack_value
        except RpfError:
            return (j, float("nan"), float("nan"), float("nan"), 0, loading,
                    float("nan"), 0, "truth_failed")
        try:
            res = po.solve_po_qss(predictor, net, u0, droop, layout)
            dev = res.aux["deviation"]
            sign_ok = int(np.sign(dev) == -np.sign(s_star)) if s_star else 1
            return (j, res.aux["omega"], dev, s_star, sign_ok, loading,
                    res.rho_hat, res.iterations, "ok")
        except (NotConverged, NonDescent, RpfError) as exc:
            return (j, float("nan"), float("nan"), s_star, 0, loading,
                    float("nan"), 0, type(exc).__name__)

    t0 = time.perf_counter()
    rows = _pmap(one, range(int(cfg["n"])), int(cfg["threads"]))
    print(f"qss: {len(rows)} OCs in {time.perf_counter() - t0:.1f}s")
    header = provenance("qss", {
        "n": int(cfg["n"]), "seed": int(cfg["seed"]),
        "droop_r": float(cfg["droop_r"]), "predictor": pred_tag,
    }, {"network_fingerprint": network_fingerprint(net), **inputs})
    write_csv(os.path.join(out, "qss_results.csv"), header,
              ["oc", "omega", "deviation", "slack_star", "sign_ok", "loading",
               "rho_hat", "iterations", "status"], rows)
    ok = [r for r in rows if r[8] == "ok"]
    if ok:
        share = np.mean([r[4] for r in ok])
        print(f"sign agreement: {share:.1%} over {len(ok)} solved")
    return 0


def _parse_decisions(text: str, net, layout: ControlLayout) -> tuple[int, ...]:
    idx = []
    for part in text.split(","):
        part = part.strip()
        if not part.startswith("P"):
            raise UsageError(f"bad decision {part!r} (use P<gen>, e.g. P2)")
        try:
            g = int(part[1:]) - 1
        except ValueError:
            raise UsageError(f"bad decision {part!r}")
        if not 0 <= g < len(net.generators):
            raise UsageError(f"no generator for decision {part!r}")
        idx.append(layout.gen_p_m[g])
    return tuple(idx)


def cmd_opf(args) -> int:
    cfg = merge_config(args, {
        "network": None, "injector_config": None, "out_dir": ".",
        "seed": 0, "threads": 1, "model": "model.json", "oracle": False,
        "decisions": "P2,P3", "grid": 0, "lam": 1e3, "svg": False,
    })
    net = _load_net(cfg)
    out = _ensure_out_dir(cfg)
    layout = ControlLayout.for_network(net)
    spec = po.OpfSpec.for_network(net, layout, lam=float(cfg["lam"]))
    decision = _parse_decisions(str(cfg["decisions"]), net, layout)
    part = po.ControlPartition(decision, layout.size)
    pred_tag, predictor, inputs = _predictor_for(cfg, net)
    rng = np.random.default_rng([int(cfg["seed"]), 20, 0])
    u0 = rescale_to_lossless(
        sample_oc(rng, net, SamplingConfig(1, int(cfg["seed"]))), layout)
    u0[list(decision)] = np.clip(u0[list(decision)], spec.u_min[list(decision)],
                                 spec.u_max[list(decision)])
    res = po.solve_po_opf(predictor, net, spec, part, u0)
    header = provenance("opf", {
        "seed": int(cfg["seed"]), "decisions": str(cfg["decisions"]),
        "lam": float(cfg["lam"]), "grid": int(cfg["grid"]),
        "predictor": pred_tag,
    }, {"network_fingerprint": network_fingerprint(net), **inputs})
    sol_rows = [("u_" + layout.labels[d], float(res.u_solution[d]))
                for d in decision]
    sol_rows += [("cost", res.aux["cost"]), ("rho_hat", res.rho_hat),
                 ("objective", res.objective),
                 ("iterations", float(res.iterations)),
                 ("max_violation", res.aux["max_violation"])]
    sol_rows += [(f"violation_{k}", v) for k, v in sorted(res.violations.items())]
    write_csv(os.path.join(out, "opf_solution.csv"), header,
              ["field", "value"], sol_rows)
    for name, val in sol_rows:
        print(f"{name} = {val:.6g}")

    if int(cfg["grid"]) > 0:
        n_pts = int(cfg["grid"])
        ranges = [(spec.u_min[d], spec.u_max[d]) for d in decision]
        t0 = time.perf_counter()
        oracle = po.grid_search_oracle(net, spec, part, u0, ranges, n_pts,
                                       predictor=predictor)
        print(f"grid {n_pts}x{n_pts} in {time.perf_counter() - t0:.1f}s; "
              f"argmin at {oracle['argmin']['u']}")
        cols = ["i", "j", "u1", "u2", "rho_exact", "cost", "max_violation",
                "objective", "converged", "rho_hat", "is_argmin"]
        if len(decision) == 1:
            cols.remove("u2")
        rows = [[row[c] for c in cols] for row in oracle["rows"]]
        write_csv(os.path.join(out, "opf_grid.csv"), header, cols, rows)
        if cfg["svg"] and len(decision) == 2:
            from . import plotting
            z = np.full((n_pts, n_pts), np.nan)
            for row in oracle["rows"]:
                z[row["i"], row["j"]] = row["rho_exact"]
            marks = [(res.u_solution[decision[0]], res.u_solution[decision[1]],
                      "po")]
            if oracle["argmin"]["u"]:
                marks.append((*oracle["argmin"]["u"], "oracle"))
            plotting.contour_plot(oracle["axes"][0], oracle["axes"][1], z,
                                  os.path.join(out, "opf_grid.svg"),
                                  xlabel=layout.labels[decision[0]],
                                  ylabel=layout.labels[decision[1]],
                                  title="exact infeasibility over the grid",
                                  marks=marks)
    return 0


# ---------------------------------------------------------------------------
# export


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    """Read a '#'-headed CSV back: (header, columns, string rows)."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        header = {}
        if first.startswith("#"):
            header = json.loads(first[1:].strip() or "{}")
            cols_line = fh.readline()
        else:
            cols_line = first
        columns = cols_line.strip().split(",") if cols_line.strip() else []
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return header, columns, rows


def cmd_export(args) -> int:
    cfg = merge_config(args, {
        "out_dir": ".", "input": None, "kind": "box", "x": None, "y": None,
        "value": "value", "group": "group", "svg_out": None, "log": True,
    })
    if not cfg["input"]:
        raise UsageError("export needs --input CSV")
    from . import plotting
    header, columns, rows = read_csv(cfg["input"])
    out = _ensure_out_dir(cfg)
    base = os.path.splitext(os.path.basename(cfg["input"]))[0]
    path = os.path.join(out, cfg["svg_out"] or base + ".svg")

    def col(name):
        if name not in columns:
            raise UsageError(f"column {name!r} not in {cfg['input']}")
        k = columns.index(name)
        return [row[k] for row in rows]

    kind = cfg["kind"]
    if kind == "box":
        groups: dict[str, list[float]] = {}
        for g, v in zip(col(cfg["group"]), col(cfg["value"])):
            try:
                groups.setdefault(g, []).append(float(v))
            except ValueError:
                continue
        plotting.box_plot(groups, path, ylabel=cfg["value"],
                          title=base, log=bool(cfg["log"]))
    elif kind == "scatter":
        if not cfg["x"] or not cfg["y"]:
            raise UsageError("scatter needs --x and --y columns")
        xs = [float(v) for v in col(cfg["x"])]
        ys = [float(v) for v in col(cfg["y"])]
        plotting.scatter_plot(xs, ys, path, xlabel=cfg["x"], ylabel=cfg["y"],
                              title=base, xlog=bool(cfg["log"]),
                              ylog=bool(cfg["log"]))
    elif kind == "contour":
        for need in ("i", "j", "u1", "u2"):
            if need not in columns:
                raise UsageError("contour export needs a grid table")
        ii = np.array([int(v) for v in col("i")])
        jj = np.array([int(v) for v in col("j")])
        vals = np.array([float(v) for v in col(cfg["value"] if cfg["value"]
                                                != "value" else "rho_exact")])
        u1 = np.array([float(v) for v in col("u1")])
        u2 = np.array([float(v) for v in col("u2")])
        n_i, n_j = ii.max() + 1, jj.max() + 1
        z = np.full((n_i, n_j), np.nan)
        z[ii, jj] = vals
        x_axis = np.unique(u1)
        y_axis = np.unique(u2)
        plotting.contour_plot(x_axis, y_axis, z, path, xlabel="u1",
                              ylabel="u2", title=base, log=bool(cfg["log"]))
    else:
        raise UsageError(f"unknown export kind {kind!r}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="rpf", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, network=True):
        sp.add_argument("--config", help="JSON file with option defaults")
        sp.add_argument("--out-dir", dest="out_dir",
                        help="output directory (env RPF_OUT_DIR)")
        sp.add_argument("--threads", type=int, help="worker cap (env RPF_THREADS)")
        if network:
            sp.add_argument("--network", help="case file (.m or .json); "
                                              "bundled 9-bus case if omitted")
            sp.add_argument("--injector-config", dest="injector_config",
                            help="JSON sidecar with generator parameters")
        sp.add_argument("--seed", type=int, help="base RNG seed")

    sp = sub.add_parser("gen", help="generate datasets",
                        parents=[], description="Sample operating conditions "
                        "and write train/test CSV files.")
    common(sp)
    sp.add_argument("--n-train", dest="n_train", type=int)
    sp.add_argument("--n-test", dest="n_test", type=int)
    sp.add_argument("--n-train-infeasible", dest="n_train_infeasible", type=int)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="fit a model on a dataset")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--features", choices=["linear", "mlp"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--val-fraction", dest="val_fraction", type=float)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--optimizer", choices=["lbfgs", "adam"])
    sp.add_argument("--formulation", choices=["rpf", "bim"])
    sp.add_argument("--widths")
    sp.add_argument("--model-out", dest="model_out")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="prediction error and residual tables")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--model-b", dest="model_b",
                    help="second checkpoint for side-by-side metrics")
    sp.add_argument("--test")
    sp.add_argument("--test-infeasible", dest="test_infeasible")
    sp.add_argument("--svg", action="store_const", const=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pf", help="feasibility restoration over a slack")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--oracle", action="store_const", const=True,
                    help="use the iterative solver instead of a model")
    sp.add_argument("--n", type=int)
    sp.add_argument("--slack", help="genN or distributed")
    sp.set_defaults(fn=cmd_pf)

    sp = sub.add_parser("qss", help="frequency deviation under droop")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--oracle", action="store_const", const=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--droop-r", dest="droop_r", type=float)
    sp.set_defaults(fn=cmd_qss)

    sp = sub.add_parser("opf", help="quadratic-cost dispatch")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--oracle", action="store_const", const=True)
    sp.add_argument("--decisions", help="comma list like P2,P3")
    sp.add_argument("--grid", type=int, help="also run an NxN grid oracle")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--svg", action="store_const", const=True)
    sp.set_defaults(fn=cmd_opf)

    sp = sub.add_parser("export", help="render a result CSV to SVG")
    common(sp, network=False)
    sp.add_argument("--input")
    sp.add_argument("--kind", choices=["box", "scatter", "contour"])
    sp.add_argument("--x")
    sp.add_argument("--y")
    sp.add_argument("--value")
    sp.add_argument("--group")
    sp.add_argument("--svg-out", dest="svg_out")
    sp.add_argument("--log", type=int, help="1 log scale, 0 linear")
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help()
            return 1
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        name = exc.filename or exc
        print(f"error: file not found: {name}", file=sys.stderr)
        return 1
    except RpfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
