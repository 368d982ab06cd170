import numpy as np
import pytest
import torch

from distfsar.config import SkcConfig
from distfsar.skc import SpatialKnowledgeCompensator, residual_cross_attention

from oracles import linear_oracle, residual_attention_oracle


def make_skc(n=2, c=4, heads=1, literal_unscaled=False, seed=0):
    torch.manual_seed(seed)
    skc = SpatialKnowledgeCompensator(
        SkcConfig(num_prototypes=n, heads=heads,
                  literal_unscaled=literal_unscaled), c)
    return skc.double()


def rand(rng, *shape):
    return torch.as_tensor(rng.normal(size=shape), dtype=torch.float64)


def zero_linear(lin):
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()


# ---------------------------------------------------------------------------
# prototype self-attention

def test_self_attention_single_prototype(rng):
    skc = make_skc(n=1)
    p = rand(rng, 1, 4)
    got = skc.prototype_self_attention(p)
    want = skc.self_v(p) + p  # softmax over one key is 1
    assert torch.allclose(got, want, atol=1e-12)


def test_self_attention_rows_sum_to_one(rng):
    skc = make_skc(n=5, c=8)
    p = rand(rng, 5, 8)
    _, attn = residual_cross_attention(skc.self_q(p), skc.self_k(p),
                                       skc.self_v(p), return_attention=True)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(5, dtype=torch.float64),
                          atol=1e-6)


def test_self_attention_zero_values_is_identity(rng):
    skc = make_skc(n=3, c=4)
    zero_linear(skc.self_v)
    p = rand(rng, 3, 4)
    assert torch.equal(skc.prototype_self_attention(p), p)


# ---------------------------------------------------------------------------
# patch aggregation

def test_patch_aggregate_single_patch(rng):
    skc = make_skc(n=2, c=4)
    protos = rand(rng, 2, 4)
    patch = rand(rng, 1, 4)
    got = skc.patch_aggregate(protos, patch)
    want = skc.patch_v(patch) + protos  # attention weight 1 on the only patch
    assert torch.allclose(got, want, atol=1e-12)


def test_patch_aggregate_zero_values_is_identity(rng):
    skc = make_skc(n=2, c=4)
    zero_linear(skc.patch_v)
    protos = rand(rng, 2, 4)
    patches = rand(rng, 5, 4)
    assert torch.equal(skc.patch_aggregate(protos, patches), protos)


def test_patch_aggregate_matches_loop_oracle(rng):
    skc = make_skc(n=2, c=4)
    protos = rand(rng, 2, 4)
    patches = rand(rng, 3, 4)
    got = skc.patch_aggregate(protos, patches).detach().numpy()
    keys = linear_oracle(patches, skc.patch_k.weight.detach(),
                         skc.patch_k.bias.detach())
    values = linear_oracle(patches, skc.patch_v.weight.detach(),
                           skc.patch_v.bias.detach())
    want = residual_attention_oracle(protos.numpy(), keys, values,
                                     protos.numpy(), scale=1.0 / 2.0)
    assert np.allclose(got, want, atol=1e-12)


def test_patch_aggregate_literal_unscaled_logits(rng):
    skc = make_skc(n=2, c=4, literal_unscaled=True)
    protos = rand(rng, 2, 4)
    patches = rand(rng, 3, 4)
    got = skc.patch_aggregate(protos, patches).detach().numpy()
    keys = linear_oracle(patches, skc.patch_k.weight.detach(),
                         skc.patch_k.bias.detach())
    values = linear_oracle(patches, skc.patch_v.weight.detach(),
                           skc.patch_v.bias.detach())
    want = residual_attention_oracle(protos.numpy(), keys, values,
                                     protos.numpy(), scale=1.0)
    assert np.allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# attribute injection

def test_inject_single_attribute(rng):
    skc = make_skc(n=3, c=4)
    protos = rand(rng, 3, 4)
    attr = rand(rng, 1, 4)
    got = skc.inject_spatial_attributes(protos, attr)
    want = skc.attr_v(attr) + protos
    assert torch.allclose(got, want, atol=1e-12)


def test_inject_zero_values_is_identity(rng):
    skc = make_skc(n=2, c=4)
    zero_linear(skc.attr_v)
    protos = rand(rng, 2, 4)
    attrs = rand(rng, 3, 4)
    assert torch.equal(skc.inject_spatial_attributes(protos, attrs), protos)


def test_inject_matches_loop_oracle(rng):
    skc = make_skc(n=2, c=4)
    protos = rand(rng, 2, 4)
    attrs = rand(rng, 3, 4)
    got = skc.inject_spatial_attributes(protos, attrs).detach().numpy()
    keys = linear_oracle(attrs, skc.attr_k.weight.detach(),
                         skc.attr_k.bias.detach())
    values = linear_oracle(attrs, skc.attr_v.weight.detach(),
                           skc.attr_v.bias.detach())
    want = residual_attention_oracle(protos.numpy(), keys, values,
                                     protos.numpy(), scale=0.5)
    assert np.allclose(got, want, atol=1e-12)


# ---------------------------------------------------------------------------
# full forward

def test_forward_identical_frames_identical_outputs(rng):
    skc = make_skc(n=2, c=4)
    frame = rng.normal(size=(3, 4))
    patches = torch.as_tensor(np.stack([frame, frame]), dtype=torch.float64)
    attrs = rand(rng, 2, 4)
    out = skc(patches, attrs)
    assert torch.equal(out[0], out[1])


def test_forward_default_shapes():
    torch.manual_seed(0)
    skc = SpatialKnowledgeCompensator(SkcConfig(num_prototypes=9), 32).double()
    patches = torch.randn(8, 16, 32, dtype=torch.float64)
    attrs = torch.randn(6, 32, dtype=torch.float64)
    assert skc(patches, attrs).shape == (8, 9, 32)


def test_forward_frame_permutation_equivariance(rng):
    skc = make_skc(n=3, c=4)
    patches = rand(rng, 5, 4, 4)
    attrs = rand(rng, 2, 4)
    out = skc(patches, attrs)
    perm = torch.as_tensor(rng.permutation(5))
    assert torch.allclose(skc(patches[perm], attrs), out[perm], atol=1e-12)


def test_forward_zeroed_value_projections_frame_constant(rng):
    skc = make_skc(n=3, c=4)
    zero_linear(skc.patch_v)
    zero_linear(skc.attr_v)
    patches = rand(rng, 5, 4, 4)
    attrs = rand(rng, 2, 4)
    out = skc(patches, attrs)
    base = skc.prototype_self_attention(skc.prototypes)
    for t in range(5):
        assert torch.equal(out[t], base)


def test_forward_batched_matches_single(rng):
    skc = make_skc(n=2, c=4)
    patches = rand(rng, 3, 4, 4, 4)  # batch of 3 clips
    attrs = rand(rng, 3, 2, 4)
    batched = skc(patches, attrs)
    for b in range(3):
        assert torch.allclose(batched[b], skc(patches[b], attrs[b]), atol=1e-12)


def test_multi_head_config_still_residual(rng):
    skc = make_skc(n=2, c=8, heads=2)
    zero_linear(skc.patch_v)
    protos = rand(rng, 2, 8)
    patches = rand(rng, 3, 8)
    assert torch.equal(skc.patch_aggregate(protos, patches), protos)
