"""Training, cross-validation, prediction and run reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..dataio import LABELS, FoldAssignment, PatchRecord, collate, make_folds, resize_image
from ..errors import CheckpointError, ConfigError, DomainError
from ..fpd import sample_partners
from ..model import LEPDNet, load_checkpoint, read_checkpoint, save_checkpoint
from ..objectives import class_prior, diagnosis_loss, dice_loss, total_loss
from .config import TrainConfig
from .metrics import aggregate, compute_metrics, confusion_matrix, roc_pr_curves, table_row

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "l_dia", "l_seg", "l_D", "total")


def poly_lr(epoch: float, total_epochs: int, base_lr: float = 1e-4, power: float = 0.9) -> float:
    if total_epochs <= 0:
        raise DomainError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * (1.0 - epoch / total_epochs) ** power


@contextmanager
def deterministic_mode(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def batch_tensors(batch, dtype=torch.float32):
    return (
        torch.as_tensor(batch.images, dtype=dtype),
        torch.as_tensor(batch.masks, dtype=dtype),
        torch.as_tensor(batch.locations, dtype=dtype),
        torch.as_tensor(batch.labels),
    )


def compute_losses(model: LEPDNet, images, masks, locations, labels, prior, cfg: TrainConfig,
                   partners: np.ndarray | None = None) -> dict:
    """Forward one batch and return every loss term (tensors)."""
    out = model(images, locations)
    l_dia = diagnosis_loss(out["logits"], labels, prior, cfg.eps_smooth)
    zero = out["logits"].new_zeros(())
    l_seg = zero
    if out["seg_logits"] is not None:
        l_seg = dice_loss(torch.sigmoid(out["seg_logits"]), masks, cfg.dice_smooth)
    l_d = zero
    if model.fpd is not None and partners is not None:
        idx = torch.as_tensor(partners)
        l_d = model.fpd(out["z"], out["z"][idx], labels, labels[idx])
    total = total_loss(l_dia, l_seg, l_d, cfg.loss_weights())
    return {"l_dia": l_dia, "l_seg": l_seg, "l_D": l_d, "total": total, "logits": out["logits"]}


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


@dataclass
class FoldResult:
    fold: int
    model: LEPDNet
    metrics: dict
    confusion: list
    test_ids: list[str]
    test_labels: np.ndarray
    test_probs: np.ndarray
    log_rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def model_seed(cfg: TrainConfig, fold: int) -> int:
    return cfg.seed * 1000 + fold


def predict_records(model: LEPDNet, records: Sequence[PatchRecord], image_size: int, batch_size: int = 64) -> np.ndarray:
    probs = []
    for i in range(0, len(records), batch_size):
        batch = collate(records[i:i + batch_size], image_size)
        images, _, locations, _ = batch_tensors(batch)
        probs.append(model.predict_proba(images, locations).double().numpy())
    return np.concatenate(probs) if probs else np.zeros((0, len(LABELS)))


def train_fold(records: Sequence[PatchRecord], folds: FoldAssignment, fold: int, cfg: TrainConfig,
               out_dir: str | Path | None = None) -> FoldResult:
    """Train on every fold but ``fold`` and evaluate on ``fold``."""
    started = time.perf_counter()
    test_ids = folds.test_ids(fold)
    train = [r for r in records if r.id not in test_ids]
    test = [r for r in records if r.id in test_ids]
    if len(train) < 2:
        raise ConfigError(f"fold {fold}: training split has {len(train)} records")
    assert not ({r.id for r in train} & {r.id for r in test})

    with deterministic_mode(cfg.deterministic):
        model = LEPDNet(cfg.net_config(model_seed(cfg, fold)), cfg.switches(),
                        fpd_literal_similarity=cfg.fpd_literal_similarity)
        model.to(memory_format=torch.channels_last)
        model.train()
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=(0.9, 0.999), weight_decay=0.0)
        prior = class_prior([r.label_index for r in train], kind=cfg.smooth_prior)
        aug = cfg.augment_config()
        order_rng = np.random.default_rng([cfg.seed, fold, 1])
        pair_rng = np.random.default_rng([cfg.seed, fold, 2])
        log_rows = []
        for epoch in range(cfg.total_epochs):
            lr = poly_lr(epoch, cfg.total_epochs, cfg.base_lr, cfg.power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            sums = dict.fromkeys(("l_dia", "l_seg", "l_D", "total"), 0.0)
            n_seen = 0
            for idx in _batches(len(train), cfg.batch_size, order_rng):
                batch = collate([train[i] for i in idx], cfg.image_size, aug, seed=cfg.seed * 7919 + fold, epoch=epoch)
                images, masks, locations, labels = batch_tensors(batch)
                images = images.contiguous(memory_format=torch.channels_last)
                partners = None
                if model.fpd is not None:
                    partners = sample_partners(batch.labels, pair_rng, cfg.balanced_pairs)
                losses = compute_losses(model, images, masks, locations, labels, prior, cfg, partners)
                optimizer.zero_grad(set_to_none=True)
                losses["total"].backward()
                optimizer.step()
                for key in sums:
                    sums[key] += float(losses[key].detach()) * len(idx)
                n_seen += len(idx)
            row = {"epoch": epoch, "lr": lr, **{k: v / n_seen for k, v in sums.items()}}
            if not all(np.isfinite(v) for v in row.values()):
                raise FloatingPointError(f"fold {fold} epoch {epoch}: non-finite loss {row}")
            log_rows.append(row)
            log.debug("fold %d epoch %d %s", fold, epoch, row)

        # evaluate in the layout a reloaded checkpoint uses, so scores match bit for bit
        model.to(memory_format=torch.contiguous_format)
        model.eval()
        probs = predict_records(model, test, cfg.image_size)
    labels = np.array([r.label_index for r in test], dtype=np.int64)
    preds = probs.argmax(1)
    result = FoldResult(
        fold=fold, model=model,
        metrics=compute_metrics(preds, labels, average=cfg.average),
        confusion=confusion_matrix(preds, labels).tolist(),
        test_ids=[r.id for r in test], test_labels=labels, test_probs=probs,
        log_rows=log_rows, seconds=time.perf_counter() - started,
    )
    if out_dir is not None:
        write_fold(result, out_dir, cfg)
    log.info("fold %d: %s (%.1fs)", fold, result.metrics, result.seconds)
    return result


def write_fold(result: FoldResult, out_dir: str | Path, cfg: TrainConfig) -> Path:
    fold_dir = Path(out_dir) / f"fold_{result.fold}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, fold_dir / "checkpoint.bin",
                    extra={"fold": result.fold, "train_config": cfg.to_dict()})
    with open(fold_dir / "log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in result.log_rows:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
    return fold_dir


@dataclass
class CVResult:
    report: dict
    folds: list[FoldResult]
    assignment: FoldAssignment


def run_cv(records: Sequence[PatchRecord], cfg: TrainConfig, out_dir: str | Path | None = None,
           only_fold: int | None = None) -> CVResult:
    started = time.perf_counter()
    assignment = make_folds(records, cfg.folds, seed=cfg.seed, group_by_patient=cfg.group_by_patient)
    fold_ids = range(cfg.folds) if only_fold is None else [only_fold]
    if only_fold is not None and not 0 <= only_fold < cfg.folds:
        raise ConfigError(f"fold {only_fold} outside [0, {cfg.folds})")
    results = [train_fold(records, assignment, k, cfg, out_dir) for k in fold_ids]
    report = build_report(results, cfg, assignment, time.perf_counter() - started)
    if out_dir is not None:
        write_report(report, out_dir)
    return CVResult(report=report, folds=results, assignment=assignment)


def build_report(results: list[FoldResult], cfg: TrainConfig, assignment: FoldAssignment, seconds: float) -> dict:
    probs = np.concatenate([r.test_probs for r in results])
    labels = np.concatenate([r.test_labels for r in results])
    pooled = compute_metrics(probs.argmax(1), labels, average=cfg.average)
    agg = aggregate([r.metrics for r in results])
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "switches": cfg.switches().tag(),
        "seeds": {"seed": cfg.seed, "fold_seed": cfg.seed,
                  "model_seeds": {str(r.fold): model_seed(cfg, r.fold) for r in results}},
        "classes": list(LABELS),
        "folds": [
            {"fold": r.fold, "n_test": len(r.test_ids), "metrics": r.metrics, "confusion": r.confusion,
             "final_losses": r.log_rows[-1] if r.log_rows else {}}
            for r in results
        ],
        "aggregate": agg,
        "table_row": table_row(agg),
        "pooled": pooled,
        "curves": roc_pr_curves(probs, labels).to_dict(),
        "timing": {"wall_clock_s": seconds, "fold_s": {str(r.fold): r.seconds for r in results}},
    }


def write_report(report: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    curves_dir = out_dir / "curves"
    curves_dir.mkdir(exist_ok=True)
    for name, c in report["curves"]["curves"].items():
        with open(curves_dir / f"{name}_roc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("threshold", "fpr", "tpr"))
            w.writerows(zip(["inf" if t is None else t for t in c["roc_thresholds"]], c["fpr"], c["tpr"]))
        with open(curves_dir / f"{name}_pr.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("threshold", "precision", "recall"))
            w.writerows(zip(["inf"] + c["pr_thresholds"], c["precision"], c["recall"]))
    return path


def fold_dirs(run_dir: str | Path) -> list[tuple[int, Path]]:
    found = []
    for path in Path(run_dir).glob("fold_*"):
        suffix = path.name.split("_", 1)[1]
        if suffix.isdigit() and (path / "checkpoint.bin").is_file():
            found.append((int(suffix), path))
    return sorted(found)


def evaluate_run(records: Sequence[PatchRecord], run_dir: str | Path) -> dict:
    """Re-score every saved fold checkpoint on its own held-out fold."""
    started = time.perf_counter()
    dirs = fold_dirs(run_dir)
    if not dirs:
        raise CheckpointError(f"{run_dir}: no fold_*/checkpoint.bin found")
    results, cfg, assignment = [], None, None
    for k, path in dirs:
        header, _ = read_checkpoint(path / "checkpoint.bin")
        saved = header.get("extra", {}).get("train_config")
        if saved is None:
            raise CheckpointError(f"{path}: checkpoint carries no training config")
        fold_cfg = TrainConfig(**saved)
        if cfg is None:
            cfg = fold_cfg
            assignment = make_folds(records, cfg.folds, seed=cfg.seed, group_by_patient=cfg.group_by_patient)
        elif fold_cfg != cfg:
            raise CheckpointError(f"{path}: training config differs from the other folds")
        model = load_checkpoint(path / "checkpoint.bin", expect=cfg.net_config())
        test_ids = assignment.test_ids(k)
        test = [r for r in records if r.id in test_ids]
        probs = predict_records(model, test, cfg.image_size)
        labels = np.array([r.label_index for r in test], dtype=np.int64)
        preds = probs.argmax(1)
        results.append(FoldResult(
            fold=k, model=model, metrics=compute_metrics(preds, labels, average=cfg.average),
            confusion=confusion_matrix(preds, labels).tolist(), test_ids=[r.id for r in test],
            test_labels=labels, test_probs=probs,
        ))
    return build_report(results, cfg, assignment, time.perf_counter() - started)


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def predict(checkpoint: str | Path | LEPDNet, image: np.ndarray, location: np.ndarray,
            expect=None) -> np.ndarray:
    """Five class probabilities for one patch (no pairing input exists here)."""
    model = checkpoint if isinstance(checkpoint, LEPDNet) else load_checkpoint(checkpoint, expect)
    size = model.cfg.input_size
    image = resize_image(np.asarray(image, dtype=np.float32), size)
    dtype = next(model.parameters()).dtype
    img = torch.as_tensor(image, dtype=dtype)[None, None]
    loc = torch.as_tensor(np.asarray(location), dtype=dtype)[None]
    if loc.shape != (1, 6):
        raise CheckpointError(f"location vector must have 6 components, got {tuple(loc.shape[1:])}")
    return model.predict_proba(img, loc)[0].double().numpy()


ABLATION_GRID = [
    (False, False, False), (True, False, False), (False, True, False), (False, False, True),
    (False, True, True), (True, True, False), (True, False, True), (True, True, True),
]


def run_ablation(records: Sequence[PatchRecord], cfg: TrainConfig, out_dir: str | Path | None = None) -> list[dict]:
    """Every CRE/SLE/FPD on-off combination, in the row order of the ablation table."""
    rows = []
    for cre, sle, fpd in ABLATION_GRID:
        sub = cfg.replace(cre=cre, sle=sle, fpd=fpd)
        sub_dir = None if out_dir is None else Path(out_dir) / sub.switches().tag()
        res = run_cv(records, sub, sub_dir)
        rows.append({"cre": cre, "sle": sle, "fpd": fpd, **res.report["aggregate"]})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("CRE", "SLE", "FPD", "Acc", "Pre", "F1", "Sen"))
            for r in rows:
                w.writerow([int(r["cre"]), int(r["sle"]), int(r["fpd"])] +
                           [f"{r['mean'][k]:.2f}±{r['std'][k]:.2f}" for k in ("Acc", "Pre", "F1", "Sen")])
    return rows


def cam_records(model: LEPDNet, records: Sequence[PatchRecord], out_dir: str | Path, target: str = "predicted") -> list[Path]:
    from .cam import cam, save_overlay

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    size = model.cfg.input_size
    for rec in records:
        image = resize_image(rec.image, size)
        if target == "predicted":
            k = int(np.argmax(predict(model, image, rec.location)))
        else:
            k = LABELS.index(target)
        _, over = cam(model, image, rec.location, k)
        path = out_dir / f"{rec.id}_{LABELS[k]}.png"
        save_overlay(path, over)
        paths.append(path)
    return paths
