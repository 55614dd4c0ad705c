"""Command-line entry point: ``inosgd {calibrate,train,audit,compare}``.

Exit codes: 0 success, 2 configuration error, 3 audit violation, 4 I/O error.
``INOSGD_NUM_THREADS`` caps the BLAS thread pools; it must be read before
numpy loads, so heavy imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUDIT = 3
EXIT_IO = 4

THREAD_ENV = "INOSGD_NUM_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def apply_thread_env() -> None:
    n = os.environ.get(THREAD_ENV)
    if n:
        if not n.isdigit() or int(n) < 1:
            raise SystemExit(f"{THREAD_ENV} must be a positive integer, got {n!r}")
        for var in _BLAS_VARS:
            os.environ[var] = n


class AuditViolation(Exception):
    def __init__(self, report: dict):
        super().__init__("audit violation")
        self.report = report


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out:
        from .fileio import write_atomic

        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def _clean(x):
    """JSON-safe copy: NaN and infinities become null."""
    import math

    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "item"):
        return _clean(x.item())
    return x


# -- calibrate ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    from .accounting import InfeasibleBudget, calibrate_profiles
    from .config import ConfigError, load_config

    cfg = load_config(args.config)
    if cfg.variant not in ("sample", "scale", "joint", "dpsgd"):
        raise ConfigError(f"calibration needs a calibrated variant, got {cfg.variant!r}")
    pq = {int(k): v for k, v in cfg.per_owner_q.items()} if cfg.per_owner_q else None
    kw = dict(C=cfg.C, q=cfg.q, per_owner_q=pq, bound=cfg.accountant)
    T = max(cfg.T, 1)
    records = []
    groups = [cfg.profiles] if cfg.variant == "dpsgd" else [[p] for p in cfg.profiles]
    for group in groups:
        try:
            for r in calibrate_profiles(group, cfg.variant, cfg.sigma, T, **kw):
                records.append(
                    {
                        "owner_id": r.owner_id,
                        "epsilon": r.epsilon,
                        "delta": r.delta,
                        "q": r.q,
                        "C": r.C,
                        "achieved_epsilon": r.achieved_epsilon,
                        "alpha": r.alpha,
                    }
                )
        except InfeasibleBudget as exc:
            for p in group:
                records.append({"owner_id": p.owner_id, "epsilon": p.epsilon, "delta": p.delta, "error": str(exc)})
    doc = {
        "variant": cfg.variant,
        "sigma": cfg.sigma,
        "T": T,
        "accountant": cfg.accountant,
        "owners": records,
    }
    _emit(_clean(doc), args.out)
    return EXIT_OK if all("error" not in r for r in records) else EXIT_CONFIG


# -- train -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .config import load_config
    from .training import train

    cfg = load_config(args.config)
    trace, model = train(cfg)
    trace.write(args.out)
    if args.checkpoint:
        from .models import save_checkpoint

        save_checkpoint(args.checkpoint, model)
    print(args.out)
    return EXIT_OK


# -- audit -------------------------------------------------------------------------------


def _audit_sensitivity(args) -> dict:
    from .audit import modular_sensitivity_probe
    from .importance import TailImportanceFunction

    scheme = args.scheme or "ino"
    tif = TailImportanceFunction.from_json(args.tif) if args.tif else None
    trials = args.trials if args.trials is not None else 10_000
    rep = modular_sensitivity_probe(scheme, seed=args.seed, trials=trials, tif=tif, mu=args.mu, keep_records=False)
    doc = {"kind": "sensitivity", **rep.to_dict()}
    if not rep.ok:
        raise AuditViolation(doc)
    return doc


def _audit_weights(args) -> dict:
    import numpy as np

    from .audit import expected_weights_oracle, simulate_effective_weights
    from .importance import TailImportanceFunction

    tif = TailImportanceFunction.from_json(args.tif) if args.tif else TailImportanceFunction.linear(args.gamma)
    n = args.trials if args.trials is not None else 50_000
    w = expected_weights_oracle(args.K, args.q_hat, tif)
    est = simulate_effective_weights(args.K, args.q_hat, tif, n, seed=args.seed)
    se = np.where(est.stderr > 0, est.stderr, np.inf)
    z = np.where(np.isfinite(se), np.abs(est.mean - w) / se, np.where(est.mean == w, 0.0, np.inf))
    monotone = bool(np.all(np.diff(w) <= 1e-12))
    doc = {
        "kind": "weights",
        "K": args.K,
        "q_hat": args.q_hat,
        "tif": tif.to_dict(),
        "batches": n,
        "analytic": w.tolist(),
        "monte_carlo": est.mean.tolist(),
        "stderr": est.stderr.tolist(),
        "max_z": float(np.max(z)),
        "non_increasing": monotone,
    }
    if not (monotone and np.max(z) <= 3.0):
        raise AuditViolation(doc)
    return doc


def _audit_gradcheck(args) -> dict:
    from . import rng as rngmod
    from .models import Architecture, ModelParams, finite_difference_check

    n = args.trials if args.trials is not None else 100
    archs = [Architecture("logistic", 5), Architecture("softmax_linear", 5, 4), Architecture("mlp1", 5, 3, hidden=6)]
    per_arch = {}
    for arch in archs:
        worst = 0.0
        for i in range(n):
            r = rngmod.substream(args.seed, f"gradcheck/{arch.name}", i)
            model = ModelParams(arch, r.normal(0, 1, arch.param_count))
            x = r.normal(0, 1, arch.dim)
            y = int(r.integers(arch.num_classes))
            worst = max(worst, finite_difference_check(model, x, y))
        per_arch[arch.name] = worst
    doc = {"kind": "gradcheck", "trials_per_arch": n, "max_abs_error": per_arch, "tolerance": 1e-6}
    if max(per_arch.values()) >= 1e-6:
        raise AuditViolation(doc)
    return doc


def cmd_audit(args) -> int:
    handlers = {"sensitivity": _audit_sensitivity, "weights": _audit_weights, "gradcheck": _audit_gradcheck}
    try:
        doc = handlers[args.kind](args)
    except AuditViolation as v:
        _emit(_clean(v.report), args.out)
        return EXIT_AUDIT
    _emit(_clean(doc), args.out)
    return EXIT_OK


# -- compare -----------------------------------------------------------------------------


def _final_metrics(trace):
    import numpy as np

    from .audit import mid_duration

    groups = trace.groups()
    recalls = {g: float(trace.column(f"recall_g{g}")[-1]) for g in groups}
    return {
        "overall_acc": float(trace.column("overall_acc")[-1]),
        "overall_loss": float(trace.column("overall_loss")[-1]),
        "recall": recalls,
        "loss": {g: float(trace.column(f"loss_g{g}")[-1]) for g in groups},
        "mid_duration": {g: mid_duration(trace, g) for g in groups},
        "worst_group_acc": min(recalls.values()),
        "recall_std": float(np.std(list(recalls.values()))),
    }


def compare_configs(cfg_a, cfg_b, seeds: int, metric: str = "recall") -> dict:
    """Run both configs on seeds ``0..seeds-1`` and summarize B minus A."""
    import numpy as np

    from .audit import pearson_r
    from .config import ConfigError
    from .training import build_experiment, train

    ra, rb = dict(cfg_a.raw), dict(cfg_b.raw)
    for key in ("optimizer", "tif", "kappa", "table_resolution", "order", "seed"):
        ra.pop(key, None)
        rb.pop(key, None)
    if ra != rb:
        diff = sorted(k for k in set(ra) | set(rb) if ra.get(k) != rb.get(k))
        raise ConfigError(f"configs must differ only in optimizer/TIF; also differ in {diff}")
    if metric not in ("recall", "loss"):
        raise ConfigError("metric must be recall or loss")
    per_seed = []
    for s in range(seeds):
        a = cfg_a.replace(seed=s)
        b = cfg_b.replace(seed=s)
        exp = build_experiment(a)
        ma = _final_metrics(train(a, exp, with_mid=False)[0])
        mb = _final_metrics(train(b, exp, with_mid=False)[0])
        per_seed.append(
            {
                "seed": s,
                "a": ma,
                "b": mb,
                "delta": {g: mb[metric][g] - ma[metric][g] for g in ma[metric]},
                "overall_acc_delta": mb["overall_acc"] - ma["overall_acc"],
            }
        )
    groups = list(per_seed[0]["delta"]) if per_seed else []
    signs = {}
    for g in groups:
        d = np.array([r["delta"][g] for r in per_seed])
        signs[g] = {"positive": int((d > 0).sum()), "zero": int((d == 0).sum()), "negative": int((d < 0).sum())}
    eps = {p.owner_id: p.epsilon for p in cfg_a.profiles}
    owners = [g for g in groups if g in eps]
    mean_change = [float(np.mean([r["delta"][g] for r in per_seed])) for g in owners]
    r = pearson_r(mean_change, [eps[g] for g in owners]) if len(owners) >= 2 else None
    med = {
        side: {g: float(np.median([x[side]["mid_duration"][g] for x in per_seed])) for g in groups}
        for side in ("a", "b")
    }
    return {
        "metric": metric,
        "seeds": seeds,
        "per_seed": per_seed,
        "sign_counts": signs,
        "median_mid_duration": med,
        "mean_overall_acc_delta": float(np.mean([x["overall_acc_delta"] for x in per_seed])) if per_seed else None,
        "pearson_r_change_vs_epsilon": r,
    }


def cmd_compare(args) -> int:
    from .config import load_config

    doc = compare_configs(load_config(args.a), load_config(args.b), args.seeds, args.metric)
    _emit(_clean(_stringify_keys(doc)), args.out)
    return EXIT_OK


def _stringify_keys(x):
    if isinstance(x, dict):
        return {str(k): _stringify_keys(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_stringify_keys(v) for v in x]
    return x


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inosgd", description="Individualized DP training with INO-SGD.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="derive per-owner sampling rates or clipping thresholds")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train", help="train and write a CSV trace")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("audit", help="run an audit and report JSON")
    a.add_argument("--kind", required=True, choices=["sensitivity", "weights", "gradcheck"])
    a.add_argument("--trials", type=int)
    a.add_argument("--scheme", choices=["ino", "idp", "top_mu", "drop_smallest_mu"])
    a.add_argument("--tif", help="TIF JSON; default random per trial (sensitivity) or linear (weights)")
    a.add_argument("--mu", type=int, default=4)
    a.add_argument("--K", type=int, default=30)
    a.add_argument("--q-hat", dest="q_hat", type=float, default=0.3)
    a.add_argument("--gamma", type=float, default=3.0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)

    m = sub.add_parser("compare", help="compare two configs over seeds")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--seeds", type=int, default=5)
    m.add_argument("--metric", default="recall")
    m.add_argument("--out")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    apply_thread_env()
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    from .data import IdxCountMismatch, IdxHeaderError, IdxTruncatedError

    try:
        return args.func(args)
    except (IdxHeaderError, IdxTruncatedError, IdxCountMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
