import numpy as np
import pytest
import torch

from hardgen.lora import AdapterSet, LoraAdapter, create_adapters, effective_weight
from hardgen.unet import create_unet


def test_scale_zero_gives_base_weight_exactly():
    adapter = LoraAdapter("layer/to_q", d_in=6, d_out=6, rank=2)
    adapter.scale = 0.0
    with torch.no_grad():
        adapter.B.normal_()
    weight = torch.randn(6, 6)
    assert torch.equal(effective_weight(weight, adapter), weight)


def test_zero_factors_give_base_weight_exactly():
    weight = torch.randn(5, 7)
    adapter = LoraAdapter("l/to_k", d_in=7, d_out=5, rank=3)  # B starts at zero
    assert torch.equal(effective_weight(weight, adapter), weight)
    with torch.no_grad():
        adapter.B.normal_()
        adapter.A.zero_()
    assert torch.equal(effective_weight(weight, adapter), weight)


def test_rank_one_update_arithmetic():
    weight = torch.eye(2)
    adapter = LoraAdapter("l/to_v", d_in=2, d_out=2, rank=1, alpha=1.0)
    with torch.no_grad():
        adapter.B.copy_(torch.tensor([[1.0], [0.0]]))
        adapter.A.copy_(torch.tensor([[0.0, 1.0]]))
    out = effective_weight(weight, adapter)
    assert torch.equal(out, torch.tensor([[1.0, 1.0], [0.0, 1.0]]))


def test_none_adapter_is_identity():
    weight = torch.randn(3, 3)
    assert effective_weight(weight, None) is weight


def test_rank_bounds_validated():
    with pytest.raises(ValueError, match="rank"):
        LoraAdapter("l", d_in=4, d_out=4, rank=0)
    with pytest.raises(ValueError, match="rank"):
        LoraAdapter("l", d_in=4, d_out=2, rank=3)


def test_shape_mismatch_rejected():
    adapter = LoraAdapter("l", d_in=4, d_out=4, rank=2)
    with pytest.raises(ValueError, match="shaped"):
        effective_weight(torch.randn(5, 5), adapter)


def test_create_adapters_covers_all_attention_projections():
    model = create_unet(widths=(4, 8, 8), cond_dim=8, time_dim=8)
    adapters = create_adapters(model, rank=2, alpha=2.0, seed=0)
    layer_names = [name for name, _ in model.cross_attention_layers()]
    expected = {f"{layer}/{proj}" for layer in layer_names for proj in ("to_q", "to_k", "to_v", "to_out")}
    assert {name for name, _ in adapters} == expected
    for _, adapter in adapters:
        assert adapter.rank == 2
        assert torch.all(adapter.B == 0)


def test_adapter_set_save_load_round_trip(tmp_path):
    model = create_unet(widths=(4, 8, 8), cond_dim=8, time_dim=8)
    adapters = create_adapters(model, rank=2, seed=1)
    with torch.no_grad():
        for _, a in adapters:
            a.B.normal_(0, 0.1)
    adapters.save(tmp_path / "adapters.ckpt")
    loaded = AdapterSet.load(tmp_path / "adapters.ckpt")
    assert {n for n, _ in loaded} == {n for n, _ in adapters}
    for name, a in adapters:
        b = loaded.get(name)
        assert np.array_equal(a.A.detach().numpy(), b.A.detach().numpy())
        assert np.array_equal(a.B.detach().numpy(), b.B.detach().numpy())
        assert a.scale == b.scale


def test_for_layer_filters_by_prefix():
    model = create_unet(widths=(4, 8, 8), cond_dim=8, time_dim=8)
    adapters = create_adapters(model, rank=1, seed=2)
    sub = adapters.for_layer("mid_attn")
    assert set(sub) == {"to_q", "to_k", "to_v", "to_out"}
    assert all(a.target_layer.startswith("mid_attn/") for a in sub.values())
