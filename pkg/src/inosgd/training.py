"""Training loop, evaluation metrics and trace emission."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .accounting import MechanismParams, OwnerMechanism, calibrate_profiles, sgm_step_rdp
from .audit import mid_condition_lhs
from .config import ExperimentConfig
from .data import (
    LabeledDataset,
    OwnerPartition,
    gen_two_group_synthetic,
    load_idx_images,
    owner_partition_from_manifest,
    poisson_sample,
)
from .fileio import write_atomic
from .importance import fast_integration_build
from .models import Architecture, ModelParams, batch_forward_losses, per_sample_losses_and_grads, predict
from .optimizers import compute_gradient_batch, idp_sgd_step, ino_sgd_step


@dataclass(frozen=True)
class Experiment:
    """Materialized inputs of one run."""

    train: LabeledDataset
    partition: OwnerPartition
    test: LabeledDataset
    test_groups: np.ndarray
    params: MechanismParams
    alpha_star: dict[int, float]
    arch: Architecture


@dataclass
class TrainingTrace:
    config_sha256: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def groups(self) -> list[int]:
        return [int(c[len("loss_g") :]) for c in self.columns if c.startswith("loss_g")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_sha256={self.config_sha256}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingTrace":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# config_sha256="):
            raise ValueError("trace header missing")
        sha = lines[0].split("=", 1)[1]
        reader = csv.reader(lines[1:])
        columns = next(reader)
        rows = []
        for rec in reader:
            row = []
            for name, v in zip(columns, rec):
                if name == "optimizer":
                    row.append(v)
                elif name == "iter":
                    row.append(int(v))
                else:
                    row.append(float(v) if v != "" else math.nan)
            rows.append(row)
        return cls(sha, columns, rows)

    def write(self, path: str | os.PathLike) -> None:
        write_atomic(path, self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


# -- experiment construction -----------------------------------------------------------


def _load_data(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        seed = cfg.seed if ds["seed"] is None else int(ds["seed"])
        kw = dict(dimension=int(ds["dimension"]), separation=float(ds["separation"]))
        train, part = gen_two_group_synthetic(int(ds["n_per_group"]), rng=rngmod.substream(seed, rngmod.DATA, 0), **kw)
        test, tpart = gen_two_group_synthetic(int(ds["test_per_group"]), rng=rngmod.substream(seed, rngmod.DATA, 1), **kw)
        return train, part, test, tpart.group_of, 2
    manifest = {int(k): v for k, v in ds["manifest"].items()}
    full = load_idx_images(ds["train_images"], ds["train_labels"])
    train = _maybe_subset(full, ds["limit"], ds["subset_seed"], cfg.seed)
    if ds["test_images"]:
        tfull = load_idx_images(ds["test_images"], ds["test_labels"])
        test = _maybe_subset(tfull, ds["test_limit"], ds["subset_seed"], cfg.seed, tag=1)
    else:
        test = train
    part = owner_partition_from_manifest(train.labels, manifest)
    tpart = owner_partition_from_manifest(test.labels, manifest)
    return train, part, test, tpart.group_of, 10


def _maybe_subset(D, limit, subset_seed, seed, tag=0):
    if limit is None or limit >= len(D):
        return D
    s = seed if subset_seed is None else int(subset_seed)
    idx = np.sort(rngmod.substream(s, "subset", tag).choice(len(D), size=int(limit), replace=False))
    return D.subset(idx)


def mechanism_from_config(cfg: ExperimentConfig, sizes: dict[int, int]) -> tuple[MechanismParams, dict[int, float]]:
    """Calibrated (or manual) per-owner parameters and each owner's best order."""
    profiles = cfg.profiles
    if cfg.variant == "manual":
        per_owner = tuple(OwnerMechanism(m["owner_id"], m["q"], m["C"]) for m in cfg.mechanism)
        alpha_star = {}
        if cfg.sigma > 0 and cfg.T > 0:
            from .accounting import sgm_epsilon

            for m, p in zip(per_owner, profiles):
                alpha_star[m.owner_id] = sgm_epsilon(m.q, m.C, cfg.sigma, cfg.T, p.delta, bound=cfg.accountant)[1]
    else:
        pq = {int(k): v for k, v in cfg.per_owner_q.items()} if cfg.per_owner_q else None
        recs = calibrate_profiles(
            profiles, cfg.variant, cfg.sigma, max(cfg.T, 1), C=cfg.C, q=cfg.q, per_owner_q=pq, bound=cfg.accountant
        )
        per_owner = tuple(OwnerMechanism(r.owner_id, r.q, r.C) for r in recs)
        alpha_star = {r.owner_id: r.alpha for r in recs}
    params = MechanismParams(per_owner, float(cfg.sigma), cfg.T, float(cfg.eta)).bind(sizes)
    return params, alpha_star


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    train, part, test, test_groups, n_classes = _load_data(cfg)
    model = cfg.model
    if model["arch"] == "logistic":
        arch = Architecture("logistic", train.dim)
    else:
        arch = Architecture(model["arch"], train.dim, int(model.get("num_classes", n_classes)), int(model.get("hidden", 0)))
    params, alpha_star = mechanism_from_config(cfg, part.sizes())
    return Experiment(train, part, test, np.asarray(test_groups), params, alpha_star, arch)


# -- metrics ----------------------------------------------------------------------------


def owner_gradient_sums(model: ModelParams, D: LabeledDataset, partition: OwnerPartition, chunk: int = 2048):
    """Unclipped full-data gradient sum of every owner."""
    out = {}
    for n in partition.owners():
        idx = partition.members(n)
        total = np.zeros(model.arch.param_count)
        for s in range(0, len(idx), chunk):
            sl = idx[s : s + chunk]
            total += per_sample_losses_and_grads(model, D.features[sl], D.labels[sl])[1].sum(axis=0)
        out[n] = total
    return out


def mid_lhs_value(model, exp: Experiment) -> float:
    """Smallest MID-condition left-hand side over ordered owner pairs."""
    sums = owner_gradient_sums(model, exp.train, exp.partition)
    sizes = exp.partition.sizes()
    best = math.inf
    owners = sorted(sums)
    for n1 in owners:
        for n2 in owners:
            if n1 == n2:
                continue
            m1, m2 = exp.params.owner(n1), exp.params.owner(n2)
            if m1.q == 0:
                continue
            sample = mid_condition_lhs(sums[n1], sums[n2], m1.q, sizes[n1], m1.C, m2.q, sizes[n2], m2.C)
            if sample.defined:
                best = min(best, sample.lhs)
    return best if math.isfinite(best) else math.nan


def evaluate(model: ModelParams, exp: Experiment) -> dict:
    X, y = exp.test.features, exp.test.labels
    losses = batch_forward_losses(model, X, y)
    correct = predict(model, X) == y
    metrics = {"overall_loss": float(losses.mean()), "overall_acc": float(correct.mean())}
    for g in sorted(set(exp.partition.groups())):
        m = exp.test_groups == g
        metrics[f"loss_g{g}"] = float(losses[m].mean()) if m.any() else math.nan
        metrics[f"recall_g{g}"] = float(correct[m].mean()) if m.any() else math.nan
    return metrics


# -- training loop ----------------------------------------------------------------------------


def train(cfg: ExperimentConfig, exp: Experiment | None = None, with_mid: bool = True) -> tuple[TrainingTrace, ModelParams]:
    """Run ``T`` steps of the configured optimizer and record evaluation rows.

    Row ``0`` is the initial evaluation; further rows follow every
    ``eval_interval`` iterations and are computed after that iteration's
    update.
    """
    exp = exp if exp is not None else build_experiment(cfg)
    params = exp.params
    groups = sorted(set(exp.partition.groups()))
    owners = list(params.owner_ids())
    columns = ["iter", "optimizer", "overall_loss", "overall_acc"]
    columns += [f"loss_g{g}" for g in groups] + [f"recall_g{g}" for g in groups]
    columns += ["mid_lhs"] + [f"eps_bar_o{n}" for n in owners]
    trace = TrainingTrace(cfg.sha256(), columns)

    step_rdp = {}
    for n in owners:
        m = params.owner(n)
        a = exp.alpha_star.get(n)
        step_rdp[n] = sgm_step_rdp(m.q, m.C, params.sigma, a, cfg.accountant) if a and params.sigma > 0 else math.nan

    tif = cfg.tif_obj
    table = None
    if cfg.optimizer == "ino":
        sizes = exp.partition.sizes()
        mass = sum(sizes[n] * params.owner(n).C for n in owners)
        kappa = float(cfg.kappa) if cfg.kappa else mass
        table = fast_integration_build(tif, kappa, int(cfg.table_resolution))
    priority = {p.owner_id: i for i, p in enumerate(sorted(cfg.profiles, key=lambda p: (p.epsilon, p.owner_id)))}

    model = ModelParams.init(exp.arch, rngmod.substream(cfg.seed, rngmod.INIT))
    X, y = exp.train.features, exp.train.labels
    ei = cfg.resolved_eval_interval

    def record(t):
        met = evaluate(model, exp)
        row = [t, cfg.optimizer, met["overall_loss"], met["overall_acc"]]
        row += [met[f"loss_g{g}"] for g in groups] + [met[f"recall_g{g}"] for g in groups]
        row.append(mid_lhs_value(model, exp) if with_mid else math.nan)
        row += [t * step_rdp[n] for n in owners]
        trace.rows.append(row)

    record(0)
    for t in range(1, cfg.T + 1):
        batch = poisson_sample(exp.partition, params, rngmod.substream(cfg.seed, rngmod.SAMPLE, t))
        gb = compute_gradient_batch(model, X, y, batch.indices, batch.owners, params, cfg.order, priority)
        noise_rng = rngmod.substream(cfg.seed, rngmod.NOISE, t)
        if cfg.optimizer == "ino":
            upd = ino_sgd_step(model, gb, params, tif, table, noise_rng)
        else:
            upd = idp_sgd_step(model, gb, params, noise_rng)
        model = model.with_flat(upd.new_theta)
        if t % ei == 0:
            record(t)
    return trace, model
