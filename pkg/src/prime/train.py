"""Training loops: self-supervised pretraining on the union cohort, and
downstream adaptation (full fine-tuning or linear probing) per fold."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from . import nn
from .data import MODALITIES, CohortManifest, FoldSplit, Modality, PatientRecord
from .errors import InvalidConfig, NoObservedModality, NonFiniteLoss
from .model import PrimeModel
from .objectives import AugmentationPolicy
from .seeds import derive_rng
from .survival import (
    BinaryHead,
    SurvivalHead,
    binary_ce,
    discretize_time,
    risk_score,
    survival_nll,
)

TASKS = ("os", "mortality3y", "recurrence3y")

CONDITIONS = {
    "full": (True, True, True),
    "li": (False, True, True),
    "lr": (True, False, True),
    "lt": (True, True, False),
    "oi": (True, False, False),
    "or": (False, True, False),
    "ot": (False, False, True),
}


def condition_mask(name: str) -> np.ndarray:
    try:
        return np.array(CONDITIONS[name.lower()], dtype=bool)
    except KeyError:
        raise InvalidConfig(f"unknown test-time condition {name!r}") from None


def _chunks(seq, size):
    for lo in range(0, len(seq), size):
        yield seq[lo : lo + size]


def _check_finite(x: float, where: str) -> float:
    if not np.isfinite(x):
        raise NonFiniteLoss(f"non-finite loss in {where}")
    return x


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    temp_align: float = 0.1
    temp_fusion: float = 0.1
    lam: float = 0.5
    lam_router: float = 0.01
    val_fraction: float = 0.2
    cohort_filter: str = "all"  # "all" | "full_only"
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0


@dataclass
class PretrainResult:
    best_state: dict[str, np.ndarray]
    best_val: float
    best_epoch: int
    loss_log: list[dict]
    router_log: list[dict]


def _view_rngs(seed: int, epoch, records: list[PatientRecord]):
    return tuple(
        [derive_rng(seed, "aug", epoch, p.patient_id, view) for p in records]
        for view in (1, 2)
    )


def pretrain(model: PrimeModel, manifest: CohortManifest,
             cfg: PretrainConfig) -> PretrainResult:
    """Self-supervised pretraining; never reads outcome labels.

    The cohort is split 80/20 into train/val; the checkpoint with the
    lowest validation loss wins. Validation augmentation draws use a fixed
    epoch key so the selection criterion is comparable across epochs.
    """
    if cfg.cohort_filter == "full_only":
        records = manifest.tri_modal()
    elif cfg.cohort_filter == "all":
        records = list(manifest.patients)
    else:
        raise InvalidConfig(f"unknown cohort_filter {cfg.cohort_filter!r}")
    if len(records) < 4:
        raise InvalidConfig("pretraining cohort too small")
    cfg.policy.validate(model.cfg.k_c)

    perm = derive_rng(cfg.seed, "pretrain-split").permutation(len(records))
    n_val = max(1, int(round(cfg.val_fraction * len(records))))
    val_recs = [records[i] for i in perm[:n_val]]
    train_recs = [records[i] for i in perm[n_val:]]

    opt = nn.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_log: list[dict] = []
    router_log: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_state = model.state_dict()

    def run_val(epoch: int) -> float:
        total = 0.0
        with ad.no_grad():
            for batch in _chunks(val_recs, cfg.batch_size):
                step = model.pretrain_step(
                    batch, cfg.policy, cfg.temp_align, cfg.temp_fusion,
                    cfg.lam, cfg.lam_router,
                    view_rngs=_view_rngs(cfg.seed, "val", batch),
                )
                total += step.total.item() * len(batch)
        return total / len(val_recs)

    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(train_recs))
        sums = {"align": 0.0, "fusion": 0.0, "router": 0.0, "total": 0.0}
        expert_frac = None
        n_stats = 0
        for batch_idx in _chunks(order, cfg.batch_size):
            batch = [train_recs[i] for i in batch_idx]
            with ad.tape() as t:
                step = model.pretrain_step(
                    batch, cfg.policy, cfg.temp_align, cfg.temp_fusion,
                    cfg.lam, cfg.lam_router,
                    view_rngs=_view_rngs(cfg.seed, epoch, batch),
                )
                _check_finite(step.total.item(), f"pretrain epoch {epoch}")
                t.backward(step.total)
            opt.step()
            opt.zero_grad()
            w = len(batch)
            sums["align"] += step.align.item() * w
            sums["fusion"] += step.fusion.item() * w
            sums["router"] += step.router.item() * w
            sums["total"] += step.total.item() * w
            for st in step.stats:
                expert_frac = st.frac_tokens.copy() if expert_frac is None \
                    else expert_frac + st.frac_tokens
                n_stats += 1
        n = len(train_recs)
        val_total = run_val(epoch)
        if val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_state = model.state_dict()
        loss_log.append({
            "epoch": epoch,
            "l_align": sums["align"] / n,
            "l_fusion": sums["fusion"] / n,
            "l_router": sums["router"] / n,
            "l_total": sums["total"] / n,
            "val_total": val_total,
            "best_val": best_val,
        })
        if expert_frac is not None:
            row = {"epoch": epoch}
            for e, v in enumerate(expert_frac / n_stats):
                row[f"frac_expert_{e}"] = float(v)
            router_log.append(row)
    return PretrainResult(best_state=best_state, best_val=best_val,
                          best_epoch=best_epoch, loss_log=loss_log,
                          router_log=router_log)


# ---------------------------------------------------------------------------
# downstream task data


@dataclass
class TaskData:
    """Supervision for one task over one cohort."""

    task: str
    ids: list[str]  # patients carrying a label for this task
    times: dict[str, float]
    events: dict[str, bool]
    labels: dict[str, bool]
    interval_idx: dict[str, int]
    bin_edges: np.ndarray


def build_task_data(manifest: CohortManifest, task: str, k_time: int,
                    train_ids: list[str] | None = None) -> TaskData:
    """Collect per-task supervision; survival bin edges come from the
    training split's uncensored event times only."""
    if task not in TASKS:
        raise InvalidConfig(f"unknown task {task!r} (expected one of {TASKS})")
    by_id = {p.patient_id: p for p in manifest.patients}
    times: dict[str, float] = {}
    events: dict[str, bool] = {}
    labels: dict[str, bool] = {}
    ids: list[str] = []
    for p in manifest.patients:
        if task == "os":
            times[p.patient_id] = p.time_months
            events[p.patient_id] = not p.censored
            ids.append(p.patient_id)
        elif task == "mortality3y":
            lab = p.label_3y_mortality
            if lab is not None:
                labels[p.patient_id] = lab
                ids.append(p.patient_id)
        else:
            lab = p.label_3y_recurrence
            if lab is not None:
                labels[p.patient_id] = lab
                ids.append(p.patient_id)
    interval_idx: dict[str, int] = {}
    edges = np.empty(0)
    if task == "os":
        fit_ids = [i for i in (train_ids or ids) if i in times]
        fit_t = np.array([times[i] for i in fit_ids])
        fit_e = np.array([events[i] for i in fit_ids])
        _, edges = discretize_time(fit_t, fit_e, k_time)
        all_t = np.array([times[i] for i in ids])
        interval_idx = dict(zip(ids, np.searchsorted(edges, all_t, side="right")))
    return TaskData(task=task, ids=ids, times=times, events=events,
                    labels=labels, interval_idx=interval_idx, bin_edges=edges)


def task_metric(task_data: TaskData, scores: dict[str, float],
                subset: list[str]) -> float:
    """C-index for survival, AUROC for the binary tasks, on ``subset``."""
    ids = [i for i in subset if i in set(task_data.ids)]
    s = np.array([scores[i] for i in ids])
    if task_data.task == "os":
        t = np.array([task_data.times[i] for i in ids])
        e = np.array([task_data.events[i] for i in ids])
        return mx.c_index(t, e, s)
    y = np.array([task_data.labels[i] for i in ids])
    return mx.auroc(s, y)


# ---------------------------------------------------------------------------
# downstream training


@dataclass
class DownstreamConfig:
    task: str = "os"
    mode: str = "lp"  # "lp" | "ft"
    k_time: int = 8
    epochs: int = 50
    batch_size: int = 16
    lr_ft: float = 5e-4
    lr_lp: float = 1e-4
    weight_decay: float = 0.01
    # LP+Missing: drop observed modalities with this probability during
    # downstream training (None disables)
    missing_p_mod: float | None = None
    seed: int = 0
    eval_batch: int = 256


@dataclass
class DownstreamResult:
    task: str
    mode: str
    head_state: dict[str, np.ndarray]
    model_state: dict[str, np.ndarray]
    bin_edges: np.ndarray
    best_epoch: int
    val_metric: float
    test_scores: dict[str, float]
    test_metric: float
    backbone_frozen_ok: bool


class FeatureCache:
    """Pooled representations per (patient, availability subset) under a
    frozen backbone: the whole point of linear probing at desk scale."""

    def __init__(self, model: PrimeModel, manifest: CohortManifest,
                 batch: int = 256):
        self.model = model
        self.by_id = {p.patient_id: p for p in manifest.patients}
        self.batch = batch
        self._cache: dict[tuple[str, tuple], np.ndarray] = {}

    def subset_key(self, pid: str, override: np.ndarray | None) -> tuple:
        p = self.by_id[pid]
        avail = np.array([p.availability[m] for m in MODALITIES], dtype=bool)
        eff = avail if override is None else (avail & override)
        return tuple(bool(x) for x in eff)

    def prewarm_subsets(self, ids: list[str]) -> None:
        """Batch-compute features for every nonempty availability subset of
        every patient (7 per tri-modal patient), so per-epoch dropout
        sampling only hits the cache."""
        for bits in range(1, 8):
            mask = np.array([bits & 1, bits & 2, bits & 4], dtype=bool)
            valid = [pid for pid in ids if any(self.subset_key(pid, mask))]
            if valid:
                self.get(valid, mask)

    def get(self, ids: list[str], override: np.ndarray | None = None) -> np.ndarray:
        """Features for patients under an optional availability override."""
        todo: dict[tuple, list[str]] = {}
        for pid in ids:
            key = self.subset_key(pid, override)
            if not any(key):
                raise NoObservedModality(f"{pid}: override removes every modality")
            if (pid, key) not in self._cache:
                todo.setdefault(key, []).append(pid)
        for key, pids in todo.items():
            mask = np.array(key, dtype=bool)
            with ad.no_grad():
                for chunk in _chunks(pids, self.batch):
                    recs = [self.by_id[i] for i in chunk]
                    pooled, _ = self.model.pooled_representation(recs, mask)
                    for pid, row in zip(chunk, pooled.data):
                        self._cache[(pid, key)] = row.copy()
        return np.stack([self._cache[(pid, self.subset_key(pid, override))]
                         for pid in ids])


def make_head(task: str, rng, d: int, k_time: int):
    return SurvivalHead(rng, d, k_time) if task == "os" else BinaryHead(rng, d)


def head_loss(task: str, head, feats: ad.Tensor, ids: list[str],
              td: TaskData) -> ad.Tensor:
    logits = head(feats)
    if task == "os":
        idx = np.array([td.interval_idx[i] for i in ids])
        cens = np.array([not td.events[i] for i in ids])
        return survival_nll(logits, idx, cens)
    y = np.array([td.labels[i] for i in ids], dtype=np.float64)
    return binary_ce(logits, y)


def head_scores(task: str, head, feats: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        logits = head(ad.constant(feats)).data
    if task == "os":
        return risk_score(logits)
    return logits  # AUROC is rank-based; the logit is the score


def _sample_missing_override(record: PatientRecord, p_mod: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Downstream modality dropout: drop observed modalities w.p. p_mod,
    keeping at least one."""
    avail = np.array([record.availability[m] for m in MODALITIES], dtype=bool)
    obs = np.where(avail)[0]
    keep = rng.random(obs.size) >= p_mod
    if not keep.any():
        keep[rng.integers(obs.size)] = True
    mask = np.zeros(3, dtype=bool)
    mask[obs[keep]] = True
    return mask


def train_downstream(model: PrimeModel, manifest: CohortManifest,
                     fold: FoldSplit, cfg: DownstreamConfig) -> DownstreamResult:
    """Train a task head (LP) or the whole model plus head (FT) on one fold,
    select the best validation checkpoint, and score the test split."""
    if cfg.mode not in ("lp", "ft"):
        raise InvalidConfig(f"unknown adaptation mode {cfg.mode!r}")
    if cfg.missing_p_mod is not None and cfg.mode != "lp":
        raise InvalidConfig("downstream modality dropout is an LP variant")
    td = build_task_data(manifest, cfg.task, cfg.k_time, train_ids=fold.train)
    labeled = set(td.ids)
    train_ids = [i for i in fold.train if i in labeled]
    val_ids = [i for i in fold.val if i in labeled]
    test_ids = [i for i in fold.test if i in labeled]
    if len(train_ids) < cfg.batch_size // 2 or not val_ids or not test_ids:
        raise InvalidConfig(f"fold too small for task {cfg.task}")
    by_id = {p.patient_id: p for p in manifest.patients}

    rng_init = derive_rng(cfg.seed, "head-init", cfg.task, cfg.mode)
    head = make_head(cfg.task, rng_init, model.cfg.d_model, cfg.k_time)

    initial_model_state = model.state_dict()
    backbone_hash_before = nn.params_hash(model.named_parameters())

    if cfg.mode == "lp":
        cache = FeatureCache(model, manifest, batch=cfg.eval_batch)
        opt = nn.AdamW(head.parameters(), lr=cfg.lr_lp,
                       weight_decay=cfg.weight_decay)
        val_feats = cache.get(val_ids)
        if cfg.missing_p_mod is not None:
            cache.prewarm_subsets(train_ids)
    else:
        opt = nn.AdamW(model.parameters() + head.parameters(), lr=cfg.lr_ft,
                       weight_decay=cfg.weight_decay)

    best_val = -np.inf
    best_epoch = -1
    best_head = head.state_dict()
    best_model = None

    def eval_scores(ids, feats=None) -> dict[str, float]:
        if cfg.mode == "lp":
            f = feats if feats is not None else cache.get(ids)
            return dict(zip(ids, head_scores(cfg.task, head, f)))
        out: dict[str, float] = {}
        with ad.no_grad():
            for chunk in _chunks(ids, cfg.eval_batch):
                pooled, _ = model.pooled_representation([by_id[i] for i in chunk])
                out.update(zip(chunk, head_scores(cfg.task, head, pooled.data)))
        return out

    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "ds-shuffle", cfg.task, epoch).permutation(
            len(train_ids))
        for batch_pos in _chunks(order, cfg.batch_size):
            ids = [train_ids[i] for i in batch_pos]
            if len(ids) < 2:
                continue
            if cfg.mode == "lp":
                if cfg.missing_p_mod is not None:
                    rows = []
                    for pid in ids:
                        r = derive_rng(cfg.seed, "ds-missing", cfg.task, epoch, pid)
                        mask = _sample_missing_override(by_id[pid],
                                                        cfg.missing_p_mod, r)
                        rows.append(cache.get([pid], mask)[0])
                    feats = np.stack(rows)
                else:
                    feats = cache.get(ids)
                with ad.tape() as t:
                    loss = head_loss(cfg.task, head, ad.constant(feats), ids, td)
                    _check_finite(loss.item(), f"downstream {cfg.task} epoch {epoch}")
                    t.backward(loss)
            else:
                recs = [by_id[i] for i in ids]
                with ad.tape() as t:
                    pooled, _ = model.pooled_representation(recs)
                    loss = head_loss(cfg.task, head, pooled, ids, td)
                    _check_finite(loss.item(), f"downstream {cfg.task} epoch {epoch}")
                    t.backward(loss)
            opt.step()
            opt.zero_grad()

        scores = eval_scores(val_ids, val_feats if cfg.mode == "lp" else None)
        try:
            metric = task_metric(td, scores, val_ids)
        except (mx.NoComparablePairs, mx.SingleClass):
            metric = -np.inf
        if metric > best_val:
            best_val = metric
            best_epoch = epoch
            best_head = head.state_dict()
            if cfg.mode == "ft":
                best_model = model.state_dict()

    head.load_state_dict(best_head)
    if cfg.mode == "ft" and best_model is not None:
        model.load_state_dict(best_model)
    test_scores = eval_scores(test_ids)
    test_metric = task_metric(td, test_scores, test_ids)

    frozen_ok = True
    if cfg.mode == "lp":
        frozen_ok = nn.params_hash(model.named_parameters()) == backbone_hash_before
        model_state = initial_model_state
    else:
        model_state = model.state_dict()
        model.load_state_dict(initial_model_state)  # leave the caller's model as given

    return DownstreamResult(
        task=cfg.task, mode=cfg.mode, head_state=best_head,
        model_state=model_state, bin_edges=td.bin_edges, best_epoch=best_epoch,
        val_metric=best_val, test_scores=test_scores, test_metric=test_metric,
        backbone_frozen_ok=frozen_ok,
    )


def predict_with_condition(model: PrimeModel, head, task: str,
                           records: list[PatientRecord], condition: str,
                           batch: int = 256) -> dict[str, float]:
    """Score patients under a test-time availability override. Overrides
    only remove modalities; patients left with none raise."""
    mask = condition_mask(condition)
    out: dict[str, float] = {}
    with ad.no_grad():
        for chunk in _chunks(records, batch):
            pooled, _ = model.pooled_representation(chunk, mask)
            scores = head_scores(task, head, pooled.data)
            out.update({p.patient_id: float(s) for p, s in zip(chunk, scores)})
    return out
