"""Experiment configuration: one TOML file with a section per module,
validated strictly (unknown keys rejected) and fingerprinted so every
output can be traced to the exact configuration that produced it."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import DEFAULT_DIMS, Modality
from .errors import InvalidConfig
from .model import ModelConfig
from .objectives import AugmentationPolicy
from .train import DownstreamConfig, PretrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "run": {
        "seed": 0,
        "threads": 1,
    },
    "data": {
        "n_patients": 600,
        "missing_rates": [0.2, 0.2, 0.2],
        "hazard_coupling": 1.0,
        "n_sites": 4,
        "noise": 0.3,
        "survival_median": 30.0,
        "censor_median": 60.0,
        "rec_median": 28.0,
        "dims_image": [128, 32],
        "dims_rna": [1, 64],
        "dims_text": [200, 48],
        "dtype": "f4",
    },
    "model": {
        "t_q": 8,
        "d_model": 64,
        "d_proj": 32,
        "n_heads": 4,
        "ffn_mult": 2,
        "k_c": 128,
        "tau": 0.07,
        "refine_depth": 1,
        "backbone_depth": 2,
        "n_experts": 4,
        "top_k": 2,
        "segment_embed": True,
    },
    "pretrain": {
        "epochs": 30,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 0.01,
        "temp_align": 0.1,
        "temp_fusion": 0.1,
        "lambda_align": 0.5,
        "lambda_router": 0.01,
        "val_fraction": 0.2,
        "cohort_filter": "all",
        "p_mod": 0.2,
        "p_tok": 0.3,
        "k_s": 8,
        "alpha": 50.0,
        "replacement": "prototype",
    },
    "downstream": {
        "k_time": 8,
        "epochs": 50,
        "batch_size": 16,
        "lr_ft": 5e-4,
        "lr_lp": 1e-4,
        "weight_decay": 0.01,
        "folds": 5,
        "missing_p_mod": 0.2,
        "trimodal_only": True,
    },
    "gradcheck": {
        "eps": 1e-5,
        "coords_per_param": 4,
        "n_patients": 6,
        "tau": 0.3,
        "temp": 0.5,
    },
}

_INT_OK_AS_FLOAT = float


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}{key}"
        if key not in base:
            raise InvalidConfig(f"unknown config key: {here}")
        cur = base[key]
        if isinstance(cur, dict):
            if not isinstance(val, dict):
                raise InvalidConfig(f"{here}: expected a section")
            out[key] = _merge_strict(cur, val, here + ".")
        else:
            if isinstance(cur, bool):
                if not isinstance(val, bool):
                    raise InvalidConfig(f"{here}: expected a boolean")
            elif isinstance(cur, float):
                if not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise InvalidConfig(f"{here}: expected a number")
                val = float(val)
            elif isinstance(cur, int):
                if not isinstance(val, int) or isinstance(val, bool):
                    raise InvalidConfig(f"{here}: expected an integer")
            elif isinstance(cur, str):
                if not isinstance(val, str):
                    raise InvalidConfig(f"{here}: expected a string")
            elif isinstance(cur, list):
                if not isinstance(val, list):
                    raise InvalidConfig(f"{here}: expected a list")
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["run"]["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw["run"]["threads"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["run"]["seed"] = int(seed)
        return ExperimentConfig(raw)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Functional update, e.g. cfg.with_overrides(pretrain={"lambda_align": 0})."""
        return ExperimentConfig(_merge_strict(self.raw, sections))

    def dims(self) -> dict[Modality, tuple[int, int]]:
        d = self.raw["data"]
        return {
            Modality.IMAGE: tuple(d["dims_image"]),
            Modality.RNA: tuple(d["dims_rna"]),
            Modality.TEXT: tuple(d["dims_text"]),
        }

    def data_kwargs(self) -> dict:
        d = self.raw["data"]
        if len(d["missing_rates"]) != 3:
            raise InvalidConfig("missing_rates needs exactly three entries")
        return {
            "n_patients": int(d["n_patients"]),
            "dims": self.dims(),
            "missing_rates": tuple(float(x) for x in d["missing_rates"]),
            "hazard_coupling": float(d["hazard_coupling"]),
            "n_sites": int(d["n_sites"]),
            "noise": float(d["noise"]),
            "survival_median": float(d["survival_median"]),
            "censor_median": float(d["censor_median"]),
            "rec_median": float(d["rec_median"]),
        }

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(**m)

    def augmentation_policy(self) -> AugmentationPolicy:
        p = self.raw["pretrain"]
        pol = AugmentationPolicy(p_mod=float(p["p_mod"]), p_tok=float(p["p_tok"]),
                                 k_s=int(p["k_s"]), alpha=float(p["alpha"]),
                                 replacement=p["replacement"])
        pol.validate(int(self.raw["model"]["k_c"]))
        return pol

    def pretrain_config(self) -> PretrainConfig:
        p = self.raw["pretrain"]
        return PretrainConfig(
            epochs=int(p["epochs"]), batch_size=int(p["batch_size"]),
            lr=float(p["lr"]), weight_decay=float(p["weight_decay"]),
            temp_align=float(p["temp_align"]), temp_fusion=float(p["temp_fusion"]),
            lam=float(p["lambda_align"]), lam_router=float(p["lambda_router"]),
            val_fraction=float(p["val_fraction"]), cohort_filter=p["cohort_filter"],
            policy=self.augmentation_policy(), seed=self.seed,
        )

    def downstream_config(self, task: str, mode: str,
                          missing: bool = False, seed: int | None = None
                          ) -> DownstreamConfig:
        d = self.raw["downstream"]
        return DownstreamConfig(
            task=task, mode=mode, k_time=int(d["k_time"]),
            epochs=int(d["epochs"]), batch_size=int(d["batch_size"]),
            lr_ft=float(d["lr_ft"]), lr_lp=float(d["lr_lp"]),
            weight_decay=float(d["weight_decay"]),
            missing_p_mod=float(d["missing_p_mod"]) if missing else None,
            seed=self.seed if seed is None else seed,
        )

    def validate(self) -> None:
        lam = float(self.raw["pretrain"]["lambda_align"])
        if not 0.0 <= lam <= 1.0:
            raise InvalidConfig("pretrain.lambda_align must lie in [0, 1]")
        rates = self.raw["data"]["missing_rates"]
        if any(not (0.0 <= float(r) < 1.0) for r in rates):
            raise InvalidConfig("data.missing_rates must lie in [0, 1)")
        if int(self.raw["downstream"]["folds"]) < 2:
            raise InvalidConfig("downstream.folds must be at least 2")
        self.model_config()
        self.augmentation_policy()

    def fingerprint(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_config() -> ExperimentConfig:
    return ExperimentConfig(copy.deepcopy(DEFAULTS))


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = default_config()
    else:
        p = Path(path)
        if not p.exists():
            raise InvalidConfig(f"config file not found: {p}")
        with open(p, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise InvalidConfig(f"{p}: {exc}") from None
        cfg = ExperimentConfig(_merge_strict(DEFAULTS, user))
    cfg.validate()
    return cfg
