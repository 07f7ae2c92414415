import numpy as np
import pytest
import torch

from lepdnet.errors import CheckpointError, ConfigError
from lepdnet.model import LEPDNet, Switches, load_checkpoint, read_checkpoint, save_checkpoint
from lepdnet.nets import NetConfig, build_backbone, build_segnet
from lepdnet.pipeline import TrainConfig
from lepdnet.pipeline.train import compute_losses

import fidelity
import oracles


def test_tiny_backbone_shape_and_finite():
    net = build_backbone(NetConfig()).eval()
    out = net(torch.zeros(2, 1, 64, 64))
    assert out.shape == (2, 64, 8, 8)
    assert torch.isfinite(out).all()


def test_resnet18_backbone_shape():
    cfg = NetConfig(backbone="resnet18_style", input_size=224)
    out = build_backbone(cfg).eval()(torch.zeros(1, 1, 224, 224))
    assert out.shape == (1, 512, 7, 7)
    assert cfg.feature_shape == (512, 7, 7)


@pytest.mark.parametrize("tap", ["bottleneck", "decoder"])
def test_segnet_shapes_and_purity(tap):
    seg = build_segnet(NetConfig(latent_tap=tap)).eval()
    x = torch.rand(3, 1, 64, 64)
    latent, logits = seg(x)
    assert latent.shape == (3, 64, 8, 8)
    assert logits.shape == (3, 1, 64, 64)
    latent2, logits2 = seg(x)
    assert torch.equal(latent, latent2) and torch.equal(logits, logits2)


def test_bad_config_and_input():
    with pytest.raises(ConfigError):
        NetConfig(backbone="vgg")
    with pytest.raises(ConfigError):
        NetConfig(input_size=60)
    model = LEPDNet(NetConfig())
    with pytest.raises(ConfigError):
        model(torch.zeros(1, 1, 32, 32), torch.zeros(1, 6))


def test_segnet_probe_gradient():
    torch.manual_seed(0)
    seg = build_segnet(NetConfig(input_size=16)).double().eval()
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    probe = seg.enc2[0].weight
    seg(x)[1].mean().backward()
    flat = probe.data.view(-1).numpy()

    def f():
        with torch.no_grad():
            return seg(x)[1].mean().item()

    idx = list(range(0, flat.size, max(1, flat.size // 12)))
    numeric = [oracles.central_difference(f, flat, i, 1e-6) for i in idx]
    assert oracles.rel_error(probe.grad.view(-1).numpy()[idx], numeric) <= 1e-4


def test_model_is_seeded_and_leaves_global_rng():
    state = torch.random.get_rng_state()
    a, b = LEPDNet(NetConfig(seed=4)), LEPDNet(NetConfig(seed=4))
    assert torch.equal(torch.random.get_rng_state(), state)
    for (na, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), na


def test_every_parameter_gets_gradient():
    cfg = TrainConfig()
    model = LEPDNet(cfg.net_config(0)).double().train()
    images, masks, locations, labels, prior = fidelity.fixed_batch()
    compute_losses(model, images, masks, locations, labels, prior, cfg, fidelity.PARTNERS)["total"].backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().max() > 0, name


def test_total_gradient_is_weighted_sum_of_terms():
    cfg = TrainConfig()
    model = LEPDNet(cfg.net_config(0)).double().train()
    images, masks, locations, labels, prior = fidelity.fixed_batch()
    params = list(model.parameters())

    def grads(key):
        loss = compute_losses(model, images, masks, locations, labels, prior, cfg, fidelity.PARTNERS)[key]
        return torch.autograd.grad(loss, params, allow_unused=True)

    parts = {k: grads(k) for k in ("total", "l_dia", "l_seg", "l_D")}
    for i in range(len(params)):
        comb = sum(w * (parts[k][i] if parts[k][i] is not None else 0)
                   for k, w in (("l_dia", 1.0), ("l_seg", cfg.alpha), ("l_D", cfg.beta)))
        torch.testing.assert_close(parts["total"][i], comb, atol=1e-12, rtol=1e-9)


def test_switch_structure():
    assert LEPDNet(NetConfig(), Switches(cre=False)).segnet is None
    assert LEPDNet(NetConfig(), Switches(fpd=False)).fpd is None
    assert Switches().tag() == "cre+sle+fpd"
    assert Switches(False, False, False).tag() == "baseline"


def test_predict_identical_with_or_without_fpd():
    images, _, locations, _, _ = fidelity.fixed_batch()
    with_fpd = LEPDNet(NetConfig(seed=9), Switches(fpd=True))
    without = LEPDNet(NetConfig(seed=9), Switches(fpd=False))
    without.load_state_dict(with_fpd.state_dict())
    a = with_fpd.predict_proba(images.float(), locations.float())
    b = without.predict_proba(images.float(), locations.float())
    assert torch.equal(a, b)
    torch.testing.assert_close(a.sum(-1), torch.ones(4), atol=1e-6, rtol=0)


def test_checkpoint_roundtrip(tmp_path):
    model = LEPDNet(NetConfig(seed=2), Switches(sle=False)).eval()
    path = tmp_path / "m.bin"
    save_checkpoint(model, path, extra={"fold": 1})
    header, _ = read_checkpoint(path)
    assert header["extra"] == {"fold": 1}
    loaded = load_checkpoint(path)
    assert loaded.switches == Switches(sle=False)
    x, y = torch.rand(2, 1, 64, 64), torch.zeros(2, 6)
    assert torch.equal(model.predict_proba(x, y), loaded.predict_proba(x, y))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")
    path = tmp_path / "m.bin"
    save_checkpoint(LEPDNet(NetConfig()), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect=NetConfig(latent_tap="decoder"))


def test_location_changes_logits_once_weights_are_generic():
    torch.manual_seed(0)
    model = LEPDNet(NetConfig(seed=1)).eval()
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
                m.running_mean.normal_(0, 0.5)
    x = torch.rand(1, 1, 64, 64).repeat(2, 1, 1, 1)
    y = torch.tensor([[1, 0, 0, 0, 0.7, 0.3], [0, 0, 1, 0, 0.5, 0.85]])
    logits = model(x, y)["logits"]
    assert not torch.allclose(logits[0], logits[1])
    assert np.isfinite(logits.detach().numpy()).all()
