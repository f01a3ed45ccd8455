"""Experiment protocols: pretrain/finetune arms, the 7-condition robustness
grid, ablation arms, sensitivity sweeps, and the gradient-check battery.
Everything here is deterministic given (config, seed)."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import metrics as mx
from . import nn
from .config import ExperimentConfig
from .data import MODALITIES, CohortManifest, Modality
from .errors import NonFiniteLoss
from .model import PrimeModel
from .objectives import AugmentationPolicy, info_nce, masked_pool
from .prototypes import PrototypeBank, RefinementModule
from .seeds import derive_rng, derive_seed
from .survival import SurvivalHead, survival_nll
from .tokenizer import ModalityTokenizer
from .train import (
    CONDITIONS,
    DownstreamResult,
    FoldSplit,
    PretrainResult,
    build_task_data,
    make_head,
    predict_with_condition,
    pretrain,
    task_metric,
    train_downstream,
)

ROBUSTNESS_CONDITIONS = ("full", "li", "lr", "lt", "oi", "or", "ot")


def build_model(cfg: ExperimentConfig, dims, seed_key: str = "model") -> PrimeModel:
    return PrimeModel(derive_rng(cfg.seed, seed_key), cfg.model_config(), dims)


def generate_cohort(cfg: ExperimentConfig) -> CohortManifest:
    return dt.generate_synthetic_cohort(seed=cfg.seed, **cfg.data_kwargs())


def downstream_folds(cfg: ExperimentConfig, manifest: CohortManifest) -> list[FoldSplit]:
    ids = None
    if cfg.raw["downstream"]["trimodal_only"]:
        ids = [p.patient_id for p in manifest.tri_modal()]
        if len(ids) < int(cfg.raw["downstream"]["folds"]):
            ids = None  # fall back to the whole cohort
    return dt.make_folds(manifest, k=int(cfg.raw["downstream"]["folds"]),
                         seed=cfg.seed, patient_ids=ids)


def run_pretrain(cfg: ExperimentConfig, manifest: CohortManifest
                 ) -> tuple[PrimeModel, PretrainResult]:
    model = build_model(cfg, manifest.dims)
    result = pretrain(model, manifest, cfg.pretrain_config())
    model.load_state_dict(result.best_state)
    return model, result


# ---------------------------------------------------------------------------
# fine-tuning protocol (per-fold downstream runs + summary)


@dataclass
class FinetuneOutput:
    task: str
    mode: str
    fold_results: list[DownstreamResult]
    prediction_rows: list[dict]
    mean: float
    std: float

    def metric_per_fold(self) -> list[float]:
        return [r.test_metric for r in self.fold_results]


def _prediction_rows(manifest: CohortManifest, fold: int, condition: str,
                     task: str, mode: str, scores: dict[str, float]) -> list[dict]:
    by_id = {p.patient_id: p for p in manifest.patients}
    rows = []
    for pid in sorted(scores):
        p = by_id[pid]
        rows.append({
            "patient_id": pid,
            "fold": fold,
            "condition": condition,
            "task": task,
            "mode": mode,
            "score": scores[pid],
            "time_months": p.time_months,
            "censored": int(p.censored),
            "label_3y_mortality": "" if p.label_3y_mortality is None
            else int(p.label_3y_mortality),
            "label_3y_recurrence": "" if p.label_3y_recurrence is None
            else int(p.label_3y_recurrence),
        })
    return rows


def run_finetune(cfg: ExperimentConfig, manifest: CohortManifest,
                 pretrained_state: dict | None, task: str, mode: str,
                 missing: bool = False,
                 folds: list[FoldSplit] | None = None) -> FinetuneOutput:
    """Per-fold downstream training from a pretrained or random init."""
    folds = folds or downstream_folds(cfg, manifest)
    fold_results = []
    rows: list[dict] = []
    for f_i, fold in enumerate(folds):
        model = build_model(cfg, manifest.dims)
        if pretrained_state is not None:
            model.load_state_dict(pretrained_state)
        dcfg = cfg.downstream_config(task, mode, missing=missing,
                                     seed=derive_seed(cfg.seed, "fold", f_i))
        res = train_downstream(model, manifest, fold, dcfg)
        fold_results.append(res)
        rows.extend(_prediction_rows(manifest, f_i, "full", task, mode,
                                     res.test_scores))
    vals = [r.test_metric for r in fold_results]
    return FinetuneOutput(task=task, mode=mode, fold_results=fold_results,
                          prediction_rows=rows, mean=float(np.mean(vals)),
                          std=float(np.std(vals)))


# ---------------------------------------------------------------------------
# robustness grid (test-time availability overrides)


@dataclass
class RobustnessOutput:
    grid_rows: list[dict]  # task x condition rows with mean/std over folds
    prediction_rows: list[dict]
    finetune: dict[str, FinetuneOutput]  # per task (Full-condition runs)

    def condition_mean(self, task: str, condition: str) -> float:
        for row in self.grid_rows:
            if row["task"] == task and row["condition"] == condition:
                return row["mean"]
        raise KeyError((task, condition))


def run_robustness(cfg: ExperimentConfig, manifest: CohortManifest,
                   pretrained_state: dict | None, mode: str = "lp",
                   missing: bool = False,
                   tasks: tuple[str, ...] = ("os", "mortality3y", "recurrence3y"),
                   folds: list[FoldSplit] | None = None) -> RobustnessOutput:
    """Train per fold (same seeds as run_finetune, so the Full column equals
    the plain finetune metric), then evaluate all 7 availability conditions
    on the held-out test folds."""
    folds = folds or downstream_folds(cfg, manifest)
    by_id = {p.patient_id: p for p in manifest.patients}
    grid_rows: list[dict] = []
    pred_rows: list[dict] = []
    finetune_outputs: dict[str, FinetuneOutput] = {}
    for task in tasks:
        td = build_task_data(manifest, task, int(cfg.raw["downstream"]["k_time"]))
        per_condition: dict[str, list[float]] = {c: [] for c in ROBUSTNESS_CONDITIONS}
        fold_results = []
        rows_full: list[dict] = []
        for f_i, fold in enumerate(folds):
            model = build_model(cfg, manifest.dims)
            if pretrained_state is not None:
                model.load_state_dict(pretrained_state)
            dcfg = cfg.downstream_config(task, mode, missing=missing,
                                         seed=derive_seed(cfg.seed, "fold", f_i))
            res = train_downstream(model, manifest, fold, dcfg)
            fold_results.append(res)
            head = make_head(task, derive_rng(0, "tmp"), model.cfg.d_model,
                             dcfg.k_time)
            head.load_state_dict(res.head_state)
            test_recs = [by_id[i] for i in fold.test]
            for cond in ROBUSTNESS_CONDITIONS:
                scores = predict_with_condition(model, head, task, test_recs, cond)
                try:
                    per_condition[cond].append(task_metric(td, scores, fold.test))
                except (mx.NoComparablePairs, mx.SingleClass):
                    pass
                pred_rows.extend(_prediction_rows(manifest, f_i, cond, task,
                                                  mode, scores))
                if cond == "full":
                    rows_full.extend(_prediction_rows(manifest, f_i, "full",
                                                      task, mode, scores))
        for cond in ROBUSTNESS_CONDITIONS:
            vals = per_condition[cond]
            grid_rows.append({
                "task": task,
                "condition": cond,
                "mean": float(np.mean(vals)) if vals else float("nan"),
                "std": float(np.std(vals)) if vals else float("nan"),
                "folds": len(vals),
            })
        vals = [r.test_metric for r in fold_results]
        finetune_outputs[task] = FinetuneOutput(
            task=task, mode=mode, fold_results=fold_results,
            prediction_rows=rows_full, mean=float(np.mean(vals)),
            std=float(np.std(vals)))
    return RobustnessOutput(grid_rows=grid_rows, prediction_rows=pred_rows,
                            finetune=finetune_outputs)


# ---------------------------------------------------------------------------
# ablation arms (reachable purely by config)

ABLATION_ARMS: list[tuple[str, dict]] = [
    ("wo_prototypes_token0", {"pretrain": {"replacement": "zeros"}}),
    ("wo_missing_modality", {"pretrain": {"cohort_filter": "full_only"}}),
    ("full_method", {}),
    ("wo_align_lambda0", {"pretrain": {"lambda_align": 0.0}}),
    ("wo_fusion_lambda1", {"pretrain": {"lambda_align": 1.0}}),
]


def run_ablation(cfg: ExperimentConfig, manifest: CohortManifest,
                 tasks: tuple[str, ...] = ("os", "mortality3y", "recurrence3y")
                 ) -> list[dict]:
    """Run the four config-reachable ablation arms plus the full method and
    emit one row per arm with per-task mean/std (pretrained + LP protocol)."""
    folds = downstream_folds(cfg, manifest)
    rows = []
    for arm_name, overrides in ABLATION_ARMS:
        arm_cfg = cfg.with_overrides(**overrides) if overrides else cfg
        _, result = run_pretrain(arm_cfg, manifest)
        row = {
            "variant": arm_name,
            "pretrain_data": "full_only"
            if arm_cfg.raw["pretrain"]["cohort_filter"] == "full_only" else "all",
            "prototypes": arm_cfg.raw["pretrain"]["replacement"],
            "lambda": arm_cfg.raw["pretrain"]["lambda_align"],
        }
        for task in tasks:
            out = run_finetune(arm_cfg, manifest, result.best_state, task, "lp",
                               folds=folds)
            row[f"{task}_mean"] = out.mean
            row[f"{task}_std"] = out.std
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# sweeps

LABEL_FRACTIONS = (1.0, 0.9, 0.7, 0.5)


def _subsample_ids(ids: list[str], fraction: float, rng) -> list[str]:
    ids = sorted(ids)
    if fraction >= 1.0:
        return ids
    n_keep = max(2, int(round(fraction * len(ids))))
    keep = rng.choice(len(ids), size=n_keep, replace=False)
    return [ids[i] for i in sorted(keep)]


def _ids_hash(ids: list[str]) -> str:
    return hashlib.sha256(",".join(ids).encode()).hexdigest()[:12]


def run_label_fraction_sweep(cfg: ExperimentConfig, manifest: CohortManifest,
                             pretrained_state: dict | None, task: str = "os",
                             arms: dict[str, dict | None] | None = None) -> list[dict]:
    """Downsample the labeled training split; the sampled indices are shared
    across arms (their hash is logged so this is checkable)."""
    folds = downstream_folds(cfg, manifest)
    if arms is None:
        arms = {"pretrained_lp": pretrained_state, "scratch_lp": None}
    rows = []
    for fraction in LABEL_FRACTIONS:
        sub_folds = []
        hashes = []
        for f_i, fold in enumerate(folds):
            rng = derive_rng(cfg.seed, "label-fraction", f_i, int(fraction * 100))
            train = _subsample_ids(fold.train, fraction, rng)
            hashes.append(_ids_hash(train))
            sub_folds.append(FoldSplit(train=train, val=fold.val, test=fold.test))
        for arm_name, state in arms.items():
            out = run_finetune(cfg, manifest, state, task, "lp", folds=sub_folds)
            for f_i, (res, h) in enumerate(zip(out.fold_results, hashes)):
                rows.append({
                    "axis": "label_fraction", "value": fraction, "arm": arm_name,
                    "fold": f_i, "metric": res.test_metric, "indices_hash": h,
                })
    return rows


def run_scalar_sweep(cfg: ExperimentConfig, manifest: CohortManifest,
                     axis: str, values: list, task: str = "os") -> list[dict]:
    """Pretrain+LP per swept value of k_c or lambda; reports Full plus the
    leave-one-out and only-one robustness averages."""
    rows = []
    for value in values:
        if axis == "k_c":
            arm_cfg = cfg.with_overrides(model={"k_c": int(value)},
                                         pretrain={"k_s": min(int(value), cfg.raw["pretrain"]["k_s"])})
        elif axis == "lambda":
            arm_cfg = cfg.with_overrides(pretrain={"lambda_align": float(value)})
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        _, result = run_pretrain(arm_cfg, manifest)
        rob = run_robustness(arm_cfg, manifest, result.best_state, tasks=(task,))
        full = rob.condition_mean(task, "full")
        loo = np.mean([rob.condition_mean(task, c) for c in ("li", "lr", "lt")])
        oo = np.mean([rob.condition_mean(task, c) for c in ("oi", "or", "ot")])
        rows.append({
            "axis": axis, "value": value, "task": task,
            "full": full, "loo_avg": float(loo), "only_one_avg": float(oo),
            "avg": float(np.mean([full, loo, oo])),
        })
    return rows


# ---------------------------------------------------------------------------
# gradient-check battery


def run_gradcheck(cfg: ExperimentConfig, inject_nan: bool = False) -> dict:
    """FD-check every differentiable module plus the composed objective.

    Returns {"rows": per-module rows, "max_rel_err": float, "elapsed": s}.
    ``inject_nan`` corrupts one parameter to prove non-finite detection works.
    """
    gc = cfg.raw["gradcheck"]
    eps = float(gc["eps"])
    coords = int(gc["coords_per_param"])
    seed = cfg.seed
    t0 = time.time()
    rows: list[dict] = []

    dims = {Modality.IMAGE: (10, 6), Modality.RNA: (1, 8), Modality.TEXT: (12, 5)}
    from .model import ModelConfig

    mcfg = ModelConfig(t_q=4, d_model=16, d_proj=8, n_heads=2, k_c=6,
                       n_experts=3, top_k=2, tau=float(gc["tau"]))
    temp = float(gc["temp"])
    rng = derive_rng(seed, "gradcheck")

    def check(module: str, f, params):
        err, worst = ad.grad_check(f, params, eps=eps, coords_per_param=coords,
                                   rng=derive_rng(seed, "gc-coords", module))
        offender = max(worst, key=worst.get) if worst else ""
        rows.append({"module": module, "max_rel_err": err,
                     "worst_param": offender, "n_params": len(params),
                     "ok": int(err < 1e-4)})

    # core ops
    a = ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = ad.constant(np.sign(rng.normal(size=(5, 3))) * (0.3 + rng.random((5, 3))))
    check("matmul", lambda: ad.sum_(ad.mul(ad.matmul(a, b), w)),
          [("a", a), ("b", b)])

    x = ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    wx = ad.constant(np.sign(rng.normal(size=(4, 6))) * (0.3 + rng.random((4, 6))))
    check("softmax", lambda: ad.sum_(ad.mul(ad.softmax(x, -1), wx)), [("x", x)])

    g_ = ad.Tensor(rng.normal(1.0, 0.2, size=6), requires_grad=True)
    b_ = ad.Tensor(rng.normal(size=6), requires_grad=True)
    check("layer_norm", lambda: ad.sum_(ad.mul(ad.layer_norm(x, g_, b_), wx)),
          [("x", x), ("gamma", g_), ("beta", b_)])

    q = ad.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    k_ = ad.Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    v = ad.Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    wq = ad.constant(np.sign(rng.normal(size=(3, 8))) * (0.3 + rng.random((3, 8))))
    mask = np.array([1, 1, 0, 1, 1], dtype=bool)
    check("cross_attention",
          lambda: ad.sum_(ad.mul(ad.cross_attention(q, k_, v, 2, mask), wq)),
          [("q", q), ("k", k_), ("v", v)])

    tok = ModalityTokenizer(derive_rng(seed, "gc-tok"), Modality.IMAGE, 6, 16, 4, 2)
    emb = ad.constant(rng.normal(size=(7, 6)))
    wt = ad.constant(np.sign(rng.normal(size=(4, 16))) * (0.3 + rng.random((4, 16))))
    check("tokenizer", lambda: ad.sum_(ad.mul(tok.encode(emb), wt)),
          list(tok.named_parameters()))

    bank = PrototypeBank(derive_rng(seed, "gc-bank"), 6, 4, 16, tau=float(gc["tau"]))
    refiner = RefinementModule(derive_rng(seed, "gc-ref"), 16, 2)
    from .prototypes import assign_logits_core, mixture_tokens

    z_in = ad.constant(rng.normal(size=(3, 4, 16)))

    def proto_loss():
        qv = assign_logits_core(bank, z_in)
        mix = mixture_tokens(bank, qv)
        return ad.sum_(ad.mul(refiner(mix), wt))

    check("prototype_bank+refine", proto_loss,
          list(bank.named_parameters()) + list(refiner.named_parameters()))

    from .moe import FusionBackbone, FusedSequence, router_loss as rloss

    bb = FusionBackbone(derive_rng(seed, "gc-bb"), 16, 2, 2, 3, 2)
    toks = ad.constant(rng.normal(size=(2, 12, 16)))
    labels = np.repeat(np.arange(3, dtype=np.intp), 4)
    rel = np.ones((2, 12), dtype=bool)
    wb = ad.constant(np.sign(rng.normal(size=(2, 16))) * (0.3 + rng.random((2, 16))))

    def backbone_loss():
        out, stats = bb(FusedSequence(toks, labels, rel))
        pooled = masked_pool(out.tokens, rel)
        return ad.add(ad.sum_(ad.mul(pooled, wb)), rloss(stats))

    check("moe_backbone+router", backbone_loss, list(bb.named_parameters()))

    hlog = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    check("survival_nll",
          lambda: survival_nll(hlog, np.array([0, 2, 4, 1]),
                               np.array([False, True, False, True])),
          [("hazard_logits", hlog)])

    av = ad.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    bv = ad.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    check("info_nce",
          lambda: info_nce(nn.l2_normalize(av), nn.l2_normalize(bv), temp),
          [("a", av), ("b", bv)])

    # composed total objective on a toy batch, sampling frozen
    man = dt.generate_synthetic_cohort(derive_seed(seed, "gc-cohort"),
                                       int(gc["n_patients"]), dims,
                                       (0.4, 0.4, 0.4))
    model = PrimeModel(derive_rng(seed, "gc-model"), mcfg, dims)
    if inject_nan:
        model.bank.prototypes.data[0, 0, 0] = np.nan
    policy = AugmentationPolicy(p_mod=0.3, p_tok=0.3, k_s=3, alpha=10.0)
    recs = man.patients
    rngs = tuple([derive_rng(seed, "gc-aug", p.patient_id, view) for p in recs]
                 for view in (1, 2))
    with ad.no_grad():
        frozen = model.pretrain_step(recs, policy, temp, temp, 0.5, 0.01,
                                     view_rngs=rngs).draws

    def total():
        return model.pretrain_step(recs, policy, temp, temp, 0.5, 0.01,
                                   frozen_draws=frozen).total

    check("composed_total_objective", total, list(model.named_parameters()))

    max_err = max(r["max_rel_err"] for r in rows)
    return {"rows": rows, "max_rel_err": max_err, "elapsed": time.time() - t0}
