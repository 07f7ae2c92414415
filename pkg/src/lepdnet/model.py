"""LEPD-Net assembly, module switches and checkpoints."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from . import fpd as fpd_mod
from .cre import CRE
from .dataio import LABELS
from .errors import CheckpointError, ConfigError
from .nets import NetConfig, build_backbone, build_segnet, check_input, init_weights
from .sle import SLE

CHECKPOINT_FORMAT = "lepdnet-checkpoint/1"
_MAGIC = b"LEPDCKPT"


@dataclass(frozen=True)
class Switches:
    cre: bool = True
    sle: bool = True
    fpd: bool = True

    def tag(self) -> str:
        on = [name for name in ("cre", "sle", "fpd") if getattr(self, name)]
        return "+".join(on) if on else "baseline"


class PairDistanceHead(nn.Module):
    """Parameter-free wrapper so FPD shows up as a (removable) submodule."""

    def __init__(self, literal_similarity: bool = False):
        super().__init__()
        self.literal_similarity = literal_similarity

    def forward(self, z, z_hat, labels1, labels2):
        return fpd_mod.fpd_loss(z, z_hat, labels1, labels2, self.literal_similarity)


class LEPDNet(nn.Module):
    def __init__(self, cfg: NetConfig, switches: Switches = Switches(), n_classes: int = len(LABELS),
                 fpd_literal_similarity: bool = False):
        super().__init__()
        self.cfg = cfg
        self.switches = switches
        c = cfg.channels
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.backbone = build_backbone(cfg)
            self.segnet = build_segnet(cfg) if switches.cre else None
            self.cre = CRE(c) if switches.cre else None
            # built even when SLE is off so parameter counts stay comparable
            self.sle = SLE(c, cfg.sle_embed_variant)
            self.head = nn.Linear(c, n_classes)
            init_weights(self)
        finally:
            torch.random.set_rng_state(gen_state)
        self.fpd = PairDistanceHead(fpd_literal_similarity) if switches.fpd else None
        if cfg.weights_path:
            self.load_state_dict(torch.load(cfg.weights_path, map_location="cpu", weights_only=True), strict=False)

    def features(self, images: torch.Tensor, locations: torch.Tensor):
        """Return ``(z, seg_logits)``; ``seg_logits`` is None without CRE."""
        check_input(images, self.cfg)
        x = self.backbone(images)
        seg_logits = None
        if self.cre is not None:
            x_seg, seg_logits = self.segnet(images)
            x = self.cre(x_seg, x)
        z = self.sle(x, locations if self.switches.sle else None)
        return z, seg_logits

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z.mean(dim=(2, 3)))

    def forward(self, images: torch.Tensor, locations: torch.Tensor):
        z, seg_logits = self.features(images, locations)
        return {"logits": self.classify(z), "seg_logits": seg_logits, "z": z}

    @torch.no_grad()
    def predict_proba(self, images: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            z, _ = self.features(images, locations)
            return torch.softmax(self.classify(z), dim=-1)
        finally:
            self.train(was_training)


def save_checkpoint(model: LEPDNet, path: str | Path, extra: dict | None = None) -> None:
    """Write ``MAGIC | header length | JSON header | torch state dict``.

    The JSON header carries the format tag, NetConfig and switches.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "net_config": model.cfg.to_dict(),
        "switches": asdict(model.switches),
        "fpd_literal_similarity": model.fpd.literal_similarity if model.fpd is not None else False,
        "extra": extra or {},
    }
    blob = io.BytesIO()
    torch.save(model.state_dict(), blob)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(blob.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    try:
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise CheckpointError(f"{path}: not a LEPD-Net checkpoint")
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n))
            state = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)
    except (OSError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
    return header, state


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> LEPDNet:
    header, state = read_checkpoint(path)
    cfg_dict = dict(header["net_config"])
    cfg_dict["weights_path"] = None
    try:
        cfg = NetConfig(**cfg_dict)
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad embedded config ({exc})") from exc
    if expect is not None:
        for key in ("backbone", "input_size", "latent_tap", "sle_embed_variant"):
            if getattr(expect, key) != getattr(cfg, key):
                raise CheckpointError(
                    f"{path}: checkpoint {key}={getattr(cfg, key)!r} but config asks {getattr(expect, key)!r}"
                )
    model = LEPDNet(cfg, Switches(**header["switches"]),
                    fpd_literal_similarity=header.get("fpd_literal_similarity", False))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not match architecture ({exc})") from exc
    model.eval()
    return model
