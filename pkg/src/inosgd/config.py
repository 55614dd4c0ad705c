"""Experiment configuration: a single JSON document, normalized and hashed."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .accounting import BOUNDS, PrivacyProfile
from .importance import TailImportanceFunction
from .models import ARCHS
from .optimizers import ORDERS

VARIANTS = ("dpsgd", "sample", "scale", "joint", "manual")
OPTIMIZERS = ("idp", "ino")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "variant": "sample",
    "optimizer": "idp",
    "tif": None,
    "sigma": 4.0,
    "T": 1000,
    "eta": 0.1,
    "eval_interval": None,
    "order": "loss",
    "seed": 0,
    "q": 0.05,
    "C": 1.0,
    "per_owner_q": None,
    "mechanism": None,
    "kappa": None,
    "table_resolution": 16,
    "accountant": "tight",
}

SYNTHETIC_DEFAULTS = {"n_per_group": 1000, "test_per_group": 1000, "dimension": 2, "separation": 2.0, "seed": None}
IDX_DEFAULTS = {"limit": None, "test_limit": None, "test_images": None, "test_labels": None, "subset_seed": None}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict = field(repr=False)

    def __getattr__(self, name):
        try:
            return self.raw[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def profiles(self) -> list[PrivacyProfile]:
        return [PrivacyProfile(int(p["owner_id"]), float(p["epsilon"]), float(p["delta"])) for p in self.raw["profiles"]]

    @property
    def tif_obj(self) -> TailImportanceFunction | None:
        return TailImportanceFunction.from_dict(self.raw["tif"]) if self.raw["tif"] else None

    @property
    def resolved_eval_interval(self) -> int:
        ei = self.raw["eval_interval"]
        return int(ei) if ei else max(1, self.raw["T"] // 100)

    def sha256(self) -> str:
        return config_hash(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def replace(self, **updates) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw.update(updates)
        return normalize(raw)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def normalize(doc: dict) -> ExperimentConfig:
    """Fill defaults and validate; the result hashes identically for
    documents that differ only in omitted defaults."""
    _need(isinstance(doc, dict), "config must be a JSON object")
    raw = copy.deepcopy(DEFAULTS)
    raw.update(copy.deepcopy(doc))
    unknown = set(raw) - set(DEFAULTS) - {"dataset", "model", "profiles"}
    _need(not unknown, f"unknown config fields {sorted(unknown)}")

    ds = raw.get("dataset")
    _need(isinstance(ds, dict) and ds.get("kind") in ("synthetic", "idx"), "dataset.kind must be synthetic or idx")
    if ds["kind"] == "synthetic":
        raw["dataset"] = {**SYNTHETIC_DEFAULTS, **ds}
        _need(int(raw["dataset"]["n_per_group"]) >= 1, "n_per_group must be at least 1")
        owners_in_data = {1, 2}
    else:
        raw["dataset"] = {**IDX_DEFAULTS, **ds}
        for key in ("train_images", "train_labels", "manifest"):
            _need(raw["dataset"].get(key) is not None, f"idx dataset needs {key}")
        man = raw["dataset"]["manifest"]
        if isinstance(man, str):
            with open(man) as fh:
                man = json.load(fh)
        _need(isinstance(man, dict), "manifest must map owner ids to label lists")
        raw["dataset"]["manifest"] = {str(int(k)): sorted(int(c) for c in v) for k, v in man.items()}
        owners_in_data = {int(k) for k in raw["dataset"]["manifest"]}

    model = raw.get("model")
    _need(isinstance(model, dict) and model.get("arch") in ARCHS, f"model.arch must be one of {ARCHS}")
    if model["arch"] == "mlp1":
        _need(int(model.get("hidden", 0)) >= 1, "mlp1 needs hidden >= 1")

    profiles = raw.get("profiles")
    _need(isinstance(profiles, list) and profiles, "profiles must be a non-empty list")
    try:
        parsed = [PrivacyProfile(int(p["owner_id"]), float(p["epsilon"]), float(p["delta"])) for p in profiles]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad privacy profile: {exc}") from None
    ids = {p.owner_id for p in parsed}
    _need(len(ids) == len(parsed), "duplicate owner in profiles")
    _need(ids == owners_in_data, f"profile owners {sorted(ids)} do not match dataset owners {sorted(owners_in_data)}")
    raw["profiles"] = sorted(
        [{"owner_id": p.owner_id, "epsilon": p.epsilon, "delta": p.delta} for p in parsed], key=lambda p: p["owner_id"]
    )

    _need(raw["variant"] in VARIANTS, f"variant must be one of {VARIANTS}")
    _need(raw["optimizer"] in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}")
    _need(raw["order"] in ORDERS, f"order must be one of {ORDERS}")
    _need(raw["accountant"] in BOUNDS, f"accountant must be one of {BOUNDS}")
    if raw["optimizer"] == "ino":
        _need(raw["tif"] is not None, "optimizer ino requires a tif")
    if raw["tif"] is not None:
        try:
            raw["tif"] = TailImportanceFunction.from_dict(raw["tif"]).to_dict()
        except ValueError as exc:
            raise ConfigError(f"bad tif: {exc}") from None
    try:
        for key in ("sigma", "eta", "q", "C"):
            raw[key] = float(raw[key])
        for key in ("T", "seed", "table_resolution"):
            raw[key] = int(raw[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric field: {exc}") from None
    _need(raw["T"] >= 0, "T must be non-negative")
    _need(raw["table_resolution"] >= 1, "table_resolution must be positive")
    _need(float(raw["eta"]) > 0, "eta must be positive")
    _need(float(raw["sigma"]) >= 0, "sigma must be non-negative")
    _need(int(raw["seed"]) >= 0, "seed must be non-negative")
    if raw["variant"] == "manual":
        mech = raw["mechanism"]
        _need(isinstance(mech, list), "variant manual needs a mechanism list [{owner_id, q, C}]")
        mids = {int(m["owner_id"]) for m in mech}
        _need(mids == ids, "mechanism owners must match profiles")
        raw["mechanism"] = sorted(
            [{"owner_id": int(m["owner_id"]), "q": float(m["q"]), "C": float(m["C"])} for m in mech],
            key=lambda m: m["owner_id"],
        )
    else:
        _need(float(raw["sigma"]) > 0, "calibrated variants need sigma > 0")
    if raw["variant"] == "joint":
        pq = raw["per_owner_q"]
        _need(isinstance(pq, dict), "variant joint needs per_owner_q")
        raw["per_owner_q"] = {str(int(k)): float(v) for k, v in pq.items()}
        _need({int(k) for k in raw["per_owner_q"]} == ids, "per_owner_q owners must match profiles")
    if raw["eval_interval"] is not None:
        _need(int(raw["eval_interval"]) >= 1, "eval_interval must be at least 1")
    return ExperimentConfig(raw)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return normalize(doc)
