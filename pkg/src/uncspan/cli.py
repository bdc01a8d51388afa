"""Command-line pipelines: generate -> train -> attack/span/calibrate/ood-eval -> verify-theory -> report.

Usage::

    uncspan <command> --config experiment.ini [--out DIR] [--threads N]

Exit codes: 0 success, 2 missing or invalid input, 3 numerical failure,
4 tolerance failure in ``verify-theory``.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import artifacts, data, metrics, nn, theory, training
from .artifacts import eps_tag, write_csv, write_json
from .attacks import ADAPTER_FACTORIES, attack_rows, overconfidence, underconfidence
from .config import ExperimentConfig, derive_seed, load_config
from .errors import ConfigError, NumericalError, ParseError, TrainingDiverged

log = logging.getLogger("uncspan")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "manifest", "training", "span", "calibration", "detection", "theory"],
    "properties": {
        "format": {"const": "uncspan-report/1"},
        "manifest": {
            "type": "object",
            "required": ["master_seed", "spec_hash", "seeds", "files"],
        },
        "training": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["mode", "epochs", "clean_accuracy", "robust_accuracy"],
            },
        },
        "span": {
            "type": "object",
            "required": ["models"],
            "properties": {
                "models": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["model", "epsilon", "mus", "mus_std", "msus", "msus_std", "n"],
                    },
                }
            },
        },
        "calibration": {"type": "object", "required": ["rows"]},
        "detection": {"type": "object", "required": ["rows"]},
        "theory": {"type": "object", "required": ["passed", "checks"]},
    },
}


class MissingInputs(Exception):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing input files: " + ", ".join(self.paths))


def _require(*paths):
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise MissingInputs(missing)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- helpers -----------------------------------------------------------------


def _data_paths(out):
    d = out / "data"
    return {k: d / f"{k}.csv" for k in ("train", "test", "osr", "ood")}


def _model_paths(cfg: ExperimentConfig, checkpoint=None):
    if checkpoint is not None:
        p = Path(checkpoint)
        _require(p)
        return {p.stem: p}
    paths = {m: cfg.out_dir / "models" / f"{m}.ckpt" for m in cfg.modes}
    _require(*paths.values())
    return paths


def _load_models(cfg, checkpoint=None):
    return {name: nn.load_params(p) for name, p in _model_paths(cfg, checkpoint).items()}


def _load_split(cfg, name):
    path = _data_paths(cfg.out_dir)[name]
    _require(path)
    return data.load_csv(path)


# --- commands ----------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir
    paths = _data_paths(out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    seeds = {
        "train": derive_seed(cfg.seed, "data/train"),
        "test": derive_seed(cfg.seed, "data/test"),
        "outliers": derive_seed(cfg.seed, "data/outliers"),
    }
    data.save_csv(data.sample(cfg.spec, cfg.n_train, seeds["train"]), paths["train"])
    data.save_csv(data.sample(cfg.spec, cfg.n_test, seeds["test"]), paths["test"])
    osr, ood = data.make_osr_and_ood_sets(
        cfg.spec, cfg.osr_offset, cfg.ood_scale, cfg.n_out, seeds["outliers"]
    )
    data.save_csv(osr, paths["osr"])
    data.save_csv(ood, paths["ood"])
    write_json(out / "manifest.json", {
        "master_seed": cfg.seed,
        "spec_hash": cfg.spec_hash(),
        "seeds": seeds,
        "sizes": {"train": cfg.n_train, "test": cfg.n_test, "outliers": cfg.n_out},
        "files": {k: _sha256(p) for k, p in paths.items()},
    })
    log.info("wrote datasets to %s", out / "data")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    init = nn.init_params(cfg.dims, cfg.activation, seed=derive_seed(cfg.seed, "model/init"))
    models_dir = cfg.out_dir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    for mode in cfg.modes:
        tcfg = cfg.train_config(mode)
        log.info("training %s model (%d epochs)", mode, tcfg.epochs)
        params, train_log = training.train(init, train, tcfg)
        nn.save_params(params, models_dir / f"{mode}.ckpt")
        training.write_log(train_log, models_dir / f"{mode}_log.csv")
        robust_cfg = cfg.attack_config(cfg.train_epsilon)
        write_json(models_dir / f"{mode}_summary.json", {
            "mode": mode,
            "epochs": tcfg.epochs,
            "seed": tcfg.seed,
            "train_epsilon": cfg.train_epsilon if mode == "adversarial" else 0.0,
            "final_loss": train_log[-1]["mean_loss"] if train_log else None,
            "clean_accuracy": training.accuracy(params, test),
            "robust_epsilon": cfg.train_epsilon,
            "robust_accuracy": training.robust_accuracy(params, test, robust_cfg, args.threads),
        })
    return EXIT_OK


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    test = _load_split(cfg, "test")
    models = _load_models(cfg, args.checkpoint)
    factory = ADAPTER_FACTORIES[cfg.attack_kind]
    summary = []
    for name, params in models.items():
        pred_clean = training.predict(params, test.features)
        clean_loss = factory(params, test.features, test.labels)
        clean_vals = nn.loss_value(params, test.features, clean_loss)
        for e in cfg.epsilons:
            res = attack_rows(
                params, test.features, test.labels, test.row_ids, factory,
                cfg.attack_config(e), threads=args.threads,
            )
            pred_adv = training.predict(params, test.features + res.delta)
            rows = [
                (r, lab, pc, pa, cl, al, float(np.max(np.abs(d))) if d.size else 0.0, fl)
                for r, lab, pc, pa, cl, al, d, fl in zip(
                    test.row_ids, test.labels, pred_clean, pred_adv, clean_vals,
                    res.loss, res.delta, res.flagged,
                )
            ]
            write_csv(
                cfg.out_dir / "attack" / f"{name}_{cfg.attack_kind}_{eps_tag(e)}.csv",
                ["row_id", "label", "pred_clean", "pred_adv", "clean_loss", "adv_loss", "linf_delta", "flag"],
                rows,
            )
            summary.append({
                "model": name,
                "kind": cfg.attack_kind,
                "epsilon": e,
                "accuracy": float(np.mean(pred_adv == test.labels)),
                "mean_adv_loss": float(np.nanmean(res.loss)),
                "flagged": int(res.flagged.sum()),
            })
    write_json(cfg.out_dir / "attack" / "summary.json", {"rows": summary})
    return EXIT_OK


def cmd_span(cfg: ExperimentConfig, args) -> int:
    test = _load_split(cfg, "test")
    models = _load_models(cfg, args.checkpoint)
    out_rows = []
    for name, params in models.items():
        sweep = metrics.span_sweep(
            params, test.features, cfg.epsilons, cfg.attack, test.row_ids, args.threads
        )
        for k, e in enumerate(cfg.epsilons):
            records = sweep.records(k, test.row_ids)
            write_csv(
                cfg.out_dir / "span" / f"{name}_{eps_tag(e)}.csv",
                ["row_id", "clean_entropy", "u_low", "u_high"],
                [(r.row_id, r.clean_entropy, r.u_low, r.u_high) for r in records],
            )
            summ = metrics.span_summary(records)
            summ.update({"model": name, "epsilon": e, "flagged": int(sweep.flagged[k].sum())})
            out_rows.append(summ)
    # models sorted by MUS at the largest budget
    top = max(cfg.epsilons)
    ranking = sorted((r for r in out_rows if r["epsilon"] == top), key=lambda r: r["mus"])
    write_json(cfg.out_dir / "span" / "summary.json", {
        "models": [
            {k: r[k] for k in ("model", "epsilon", "mus", "mus_std", "msus", "msus_std", "n", "flagged")}
            for r in out_rows
        ],
        "ranking_epsilon": top,
        "ranking": [r["model"] for r in ranking],
    })
    return EXIT_OK


def _reliability_rows(bins):
    return [
        (s, lo, hi, int(m), ex, ob)
        for s, (lo, hi, m, ex, ob) in enumerate(
            zip(bins.lo, bins.hi, bins.mass, bins.expected, bins.observed)
        )
    ]


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    test = _load_split(cfg, "test")
    models = _load_models(cfg, args.checkpoint)
    acfg = cfg.attack_config(cfg.calibration_epsilon)
    table = []
    for name, params in models.items():
        X = test.features
        over = attack_rows(params, X, test.labels, test.row_ids, overconfidence, acfg, threads=args.threads)
        under = attack_rows(params, X, test.labels, test.row_ids, underconfidence, acfg, threads=args.threads)
        for condition, delta in (("clean", np.zeros_like(X)), ("over", over.delta), ("under", under.delta)):
            probs = nn.forward(params, X + delta)
            conf, correct = metrics.confidence_and_correct(probs, test.labels)
            bins = metrics.calibration_bins(conf, correct, cfg.buckets)
            write_csv(
                cfg.out_dir / "calibration" / f"{name}_{condition}_reliability.csv",
                ["bucket", "lo", "hi", "mass", "expected", "observed"],
                _reliability_rows(bins),
            )
            table.append({
                "model": name,
                "condition": condition,
                "epsilon": 0.0 if condition == "clean" else cfg.calibration_epsilon,
                "ece": metrics.ece(bins),
                "signed_ece": metrics.signed_ece(bins),
                "mean_confidence": float(conf.mean()),
                "accuracy": float(correct.mean()),
            })
    cols = ["model", "condition", "epsilon", "ece", "signed_ece", "mean_confidence", "accuracy"]
    write_csv(cfg.out_dir / "calibration" / "table.csv", cols, [[r[c] for c in cols] for r in table])
    write_json(cfg.out_dir / "calibration" / "summary.json", {"buckets": cfg.buckets, "rows": table})
    return EXIT_OK


def cmd_ood_eval(cfg: ExperimentConfig, args) -> int:
    test = _load_split(cfg, "test")
    outliers = {s: _load_split(cfg, s) for s in cfg.scenarios}
    models = _load_models(cfg, args.checkpoint)
    rows = []
    for name, params in models.items():
        h_in = metrics.entropy(nn.forward(params, test.features))
        for scenario, ds in outliers.items():
            deltas = metrics.camouflage_sweep(
                params, ds.features, cfg.epsilons, cfg.attack, ds.row_ids, args.threads
            )
            for e, delta in zip(cfg.epsilons, deltas):
                h_out = metrics.entropy(nn.forward(params, ds.features + delta))
                det = metrics.detection_metrics(h_in, h_out)
                rows.append({
                    "model": name, "scenario": scenario, "epsilon": e,
                    "auroc": det.auroc, "aupr_in": det.aupr_in, "aupr_out": det.aupr_out,
                    "fpr95tpr": det.fpr_at_95_tpr,
                    "mean_entropy_in": float(h_in.mean()), "mean_entropy_out": float(h_out.mean()),
                })
    cols = ["model", "scenario", "epsilon", "auroc", "aupr_in", "aupr_out", "fpr95tpr"]
    write_csv(cfg.out_dir / "detection" / "detection.csv", cols, [[r[c] for c in cols] for r in rows])
    write_json(cfg.out_dir / "detection" / "summary.json", {"rows": rows})
    return EXIT_OK


def run_theory_checks(grid_n):
    """Lattice sweep of the closed-form optimum against the grid oracle."""
    zs, betas = theory.default_lattice()
    rows, worst_ratio, min_gap, strict_ok, worst_stat = [], 0.0, np.inf, True, 0.0
    for z in zs:
        for b in betas:
            pt = theory.equilibrium_point(float(z), float(b), grid_n)
            tol = 2 * (1 - 2 * b) / grid_n
            worst_ratio = max(worst_ratio, abs(pt.alpha_closed - pt.alpha_oracle) / tol)
            gap = pt.gap
            min_gap = min(min_gap, gap)
            if b > 0 and abs(z - 0.5) > 1e-12 and not gap > 0:
                strict_ok = False
            worst_stat = max(
                worst_stat, abs(theory.adversarial_loss_derivative(pt.alpha_closed, z, b))
            )
            rows.append((z, b, pt.alpha_closed, pt.alpha_oracle, pt.entropy_standard, pt.entropy_robust, gap))
    checks = {
        "closed_form_oracle": {"max_error_over_tolerance": worst_ratio, "passed": worst_ratio <= 1.0},
        "entropy_gap_nonnegative": {"min_gap": float(min_gap), "passed": bool(min_gap >= -1e-12)},
        "entropy_gap_strict": {"passed": strict_ok},
        "stationarity": {"max_abs_derivative": worst_stat, "passed": worst_stat <= 1e-9},
    }
    return rows, checks


def cmd_verify_theory(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir / "theory"
    rows, checks = run_theory_checks(cfg.grid_n)
    write_csv(
        out / "lattice.csv",
        ["z", "beta", "alpha_closed", "alpha_oracle", "entropy_std", "entropy_robust", "gap"],
        rows,
    )
    model_paths = {m: cfg.out_dir / "models" / f"{m}.ckpt" for m in cfg.modes}
    grid = data.probe_grid(cfg.spec) if cfg.spec.num_classes == 2 else None
    for mode, path in model_paths.items():
        if grid is None or not path.exists():
            continue
        params = nn.load_params(path)
        beta = 0.0
        if mode == "adversarial":
            beta = theory.empirical_beta(
                params, grid, training.inner_attack_config(cfg.train_epsilon, cfg.inner_steps), args.threads
            )
        rep = theory.convergence_check(params, cfg.spec, grid, mode, beta)
        write_csv(
            out / f"convergence_{mode}.csv",
            ["x", "z", "alpha_model", "target", "abs_dev"],
            # x is the coordinate along the inter-mean axis, in sigmas from the midpoint
            zip(np.linspace(-4.0, 4.0, len(grid)), rep.z, rep.alpha_model, rep.target, rep.abs_dev),
        )
        entry = {"beta": beta, "mean_dev": rep.mean_dev, "max_dev": rep.max_dev}
        if mode == "standard":
            entry["tolerance"] = cfg.convergence_tolerance
            entry["passed"] = rep.mean_dev <= cfg.convergence_tolerance
        checks[f"convergence_{mode}"] = entry
    passed = all(c.get("passed", True) for c in checks.values())
    write_json(out / "summary.json", {"grid_n": cfg.grid_n, "passed": passed, "checks": checks})
    return EXIT_OK if passed else EXIT_TOLERANCE


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir
    needed = {
        "manifest": out / "manifest.json",
        "span": out / "span" / "summary.json",
        "calibration": out / "calibration" / "summary.json",
        "detection": out / "detection" / "summary.json",
        "theory": out / "theory" / "summary.json",
    }
    model_summaries = {m: out / "models" / f"{m}_summary.json" for m in cfg.modes}
    _require(*needed.values(), *model_summaries.values())
    bundle = {"format": "uncspan-report/1"}
    bundle["manifest"] = artifacts.read_json(needed["manifest"])
    bundle["training"] = {m: artifacts.read_json(p) for m, p in model_summaries.items()}
    for key in ("span", "calibration", "detection", "theory"):
        bundle[key] = artifacts.read_json(needed[key])
    jsonschema.validate(bundle, REPORT_SCHEMA)
    write_json(out / "report.json", bundle)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "attack": cmd_attack,
    "span": cmd_span,
    "calibrate": cmd_calibrate,
    "ood-eval": cmd_ood_eval,
    "verify-theory": cmd_verify_theory,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uncspan", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for attacks")
    parser.add_argument("--checkpoint", default=None, help="evaluate only this checkpoint")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        print("uncspan: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    out_override = args.out or os.environ.get("UNCSPAN_OUT_DIR")
    try:
        cfg = load_config(args.config, out_override)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        # single-threaded BLAS keeps every floating-point reduction order fixed
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg, args)
    except MissingInputs as exc:
        print(f"uncspan: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"uncspan: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"uncspan: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"uncspan: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"uncspan: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
