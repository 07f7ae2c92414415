from .config import TrainConfig, dump_config_text, load_config, parse_config_text
from .metrics import compute_metrics, roc_pr_curves
from .train import poly_lr, predict, run_ablation, run_cv, train_fold

__all__ = [
    "TrainConfig", "compute_metrics", "dump_config_text", "load_config", "parse_config_text",
    "poly_lr", "predict", "roc_pr_curves", "run_ablation", "run_cv", "train_fold",
]
