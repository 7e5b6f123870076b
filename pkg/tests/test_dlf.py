"""Two-scale token fusion: class-token pooling, encoder blocks, and the
single-query cross-attention against loop-based numpy oracles."""

from __future__ import annotations

import numpy as np
import pytest

from hiformer.config import build_config
from hiformer.dlf import (
    CrossAttention,
    DoubleLevelFusion,
    EncoderBlock,
    FullAttention,
    LevelPath,
)
from hiformer.errors import EmptyTokens, ShapeMismatch
from hiformer.nn import init_parameters
from hiformer.swin import TokenMap
from hiformer.tensor import Tensor, no_grad


def np_layer_norm(x, weight, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def naive_full_attention(fa, x):
    """Per-head loop reference for self-attention, float64."""
    N, L, D = x.shape
    h = fa.heads
    hd = D // h
    w_qkv = fa.qkv.weight.data.astype(np.float64)
    b_qkv = fa.qkv.bias.data.astype(np.float64)
    out = np.zeros((N, L, D))
    for n in range(N):
        qkv = x[n].astype(np.float64) @ w_qkv + b_qkv
        q, k, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
        for hh in range(h):
            sl = slice(hh * hd, (hh + 1) * hd)
            probs = np_softmax((q[:, sl] * hd ** -0.5) @ k[:, sl].T)
            out[n, :, sl] = probs @ v[:, sl]
    return out @ fa.proj.weight.data + fa.proj.bias.data


def naive_cross_attention(ca, cls, patches):
    """Single-query reference: the class token against [cls || patches]."""
    N, _, D = cls.shape
    h = ca.heads
    hd = D // h
    seq = np.concatenate([cls, patches], axis=1).astype(np.float64)
    seq = np_layer_norm(seq, ca.norm.weight.data, ca.norm.bias.data, ca.norm.eps)
    out = np.zeros((N, 1, D))
    for n in range(N):
        q = seq[n, 0:1] @ ca.wq.weight.data + ca.wq.bias.data
        k = seq[n] @ ca.wk.weight.data + ca.wk.bias.data
        v = seq[n] @ ca.wv.weight.data + ca.wv.bias.data
        for hh in range(h):
            sl = slice(hh * hd, (hh + 1) * hd)
            probs = np_softmax((q[:, sl] * hd ** -0.5) @ k[:, sl].T)
            out[n, :, sl] = probs @ v[:, sl]
    return cls + out @ ca.proj.weight.data + ca.proj.bias.data


# -- full attention and encoder blocks ---------------------------------------

def test_full_attention_matches_naive(rng):
    fa = FullAttention(dim=8, heads=2)
    init_parameters(fa, seed=11)
    x = rng.normal(size=(3, 10, 8)).astype(np.float32)
    with no_grad():
        out = fa(Tensor(x)).data
    assert np.abs(out - naive_full_attention(fa, x)).max() < 1e-6


def test_full_attention_head_guard():
    with pytest.raises(ShapeMismatch):
        FullAttention(dim=8, heads=3)


def test_encoder_block_identity_when_projections_zeroed(rng):
    blk = EncoderBlock(dim=8, heads=2, mlp_ratio=1.0)
    init_parameters(blk, seed=12)
    blk.attn.proj.weight.data[...] = 0
    blk.attn.proj.bias.data[...] = 0
    blk.mlp.fc2.weight.data[...] = 0
    blk.mlp.fc2.bias.data[...] = 0
    x = rng.normal(size=(2, 6, 8)).astype(np.float32)
    with no_grad():
        out = blk(Tensor(x)).data
    np.testing.assert_array_equal(out, x)


# -- level path ---------------------------------------------------------------

def test_class_token_is_mean_of_normed_tokens(rng):
    path = LevelPath(dim=8, n_tokens=12, depth=1, heads=2, mlp_ratio=1.0)
    init_parameters(path, seed=13)
    tokens = rng.normal(size=(2, 12, 8)).astype(np.float32)
    with no_grad():
        cls = path.make_class_token(Tensor(tokens)).data
    ref = np_layer_norm(tokens.astype(np.float64),
                        path.cls_norm.weight.data, path.cls_norm.bias.data,
                        path.cls_norm.eps).mean(axis=1, keepdims=True)
    np.testing.assert_allclose(cls, ref, atol=1e-5)


def test_level_path_output_shape(rng):
    path = LevelPath(dim=8, n_tokens=12, depth=2, heads=2, mlp_ratio=1.0)
    init_parameters(path, seed=14)
    with no_grad():
        out = path(Tensor(rng.normal(size=(2, 12, 8)).astype(np.float32)))
    assert out.shape == (2, 13, 8)  # class token prepended


def test_level_path_guards(rng):
    path = LevelPath(dim=8, n_tokens=12, depth=1, heads=2, mlp_ratio=1.0)
    with pytest.raises(ShapeMismatch):
        path(Tensor(rng.normal(size=(1, 9, 8)).astype(np.float32)))
    with pytest.raises(EmptyTokens):
        path.make_class_token(Tensor(np.zeros((1, 0, 8), dtype=np.float32)))


def test_position_embedding_participates(rng):
    path = LevelPath(dim=8, n_tokens=4, depth=0, heads=2, mlp_ratio=1.0)
    init_parameters(path, seed=15)
    tokens = Tensor(rng.normal(size=(1, 4, 8)).astype(np.float32))
    with no_grad():
        base = path(tokens).data.copy()
        path.pos.data[...] += 1.0
        shifted = path(tokens).data
    np.testing.assert_allclose(shifted - base, 1.0, atol=1e-6)


# -- cross attention ----------------------------------------------------------

def test_cross_attention_matches_naive(rng):
    ca = CrossAttention(dim=8, heads=2)
    init_parameters(ca, seed=16)
    cls = rng.normal(size=(3, 1, 8)).astype(np.float32)
    patches = rng.normal(size=(3, 20, 8)).astype(np.float32)
    with no_grad():
        out = ca(Tensor(cls), Tensor(patches)).data
    assert np.abs(out - naive_cross_attention(ca, cls, patches)).max() < 1e-6


def test_cross_attention_guards(rng):
    ca = CrossAttention(dim=8, heads=2)
    two_rows = Tensor(rng.normal(size=(1, 2, 8)).astype(np.float32))
    patches = Tensor(rng.normal(size=(1, 5, 8)).astype(np.float32))
    with pytest.raises(ShapeMismatch):
        ca(two_rows, patches)
    with pytest.raises(ShapeMismatch):
        ca(Tensor(rng.normal(size=(1, 1, 8)).astype(np.float32)),
           Tensor(rng.normal(size=(1, 5, 6)).astype(np.float32)))


def test_score_entries_count_single_query_rows(rng):
    ca = CrossAttention(dim=8, heads=2)
    init_parameters(ca, seed=17)
    cls = Tensor(rng.normal(size=(3, 1, 8)).astype(np.float32))
    with no_grad():
        ca(cls, Tensor(rng.normal(size=(3, 9, 8)).astype(np.float32)))
    # batch 3 x heads 2 x 1 query x (1 + 9) keys
    assert ca.score_entries == 3 * 2 * 1 * 10
    with no_grad():
        ca(cls, Tensor(rng.normal(size=(3, 19, 8)).astype(np.float32)))
    assert ca.score_entries == 60 + 3 * 2 * 1 * 20


def test_score_entries_double_when_tokens_double(rng):
    ca = CrossAttention(dim=8, heads=2)
    init_parameters(ca, seed=18)
    cls = Tensor(rng.normal(size=(1, 1, 8)).astype(np.float32))
    with no_grad():
        ca(cls, Tensor(rng.normal(size=(1, 31, 8)).astype(np.float32)))
    first = ca.score_entries
    ca.score_entries = 0
    with no_grad():
        ca(cls, Tensor(rng.normal(size=(1, 63, 8)).astype(np.float32)))
    assert ca.score_entries == 2 * first


# -- the fusion module --------------------------------------------------------

def _tiny_fusion_inputs(rng, n=2):
    P_l = TokenMap(Tensor(rng.normal(size=(n, 64, 8)).astype(np.float32)), (8, 8))
    P_s = TokenMap(Tensor(rng.normal(size=(n, 4, 32)).astype(np.float32)), (2, 2))
    return P_l, P_s


def test_fusion_output_contract(rng):
    dlf = DoubleLevelFusion(build_config("hiformer-tiny"))
    init_parameters(dlf, seed=19)
    P_l, P_s = _tiny_fusion_inputs(rng)
    with no_grad():
        deep, shallow = dlf(P_l, P_s)
    assert deep.shape == (2, 32, 2, 2)
    assert shallow.shape == (2, 8, 8, 8)
    assert dlf.last_cls[0].shape == (2, 1, 32)
    assert dlf.last_cls[1].shape == (2, 1, 8)


def test_fusion_patches_survive_the_swap(rng):
    # The class-token exchange must not touch patch tokens: the returned
    # maps equal the post-encoder patch rows exactly.
    dlf = DoubleLevelFusion(build_config("hiformer-tiny"))
    init_parameters(dlf, seed=20)
    P_l, P_s = _tiny_fusion_inputs(rng)
    with no_grad():
        es = dlf.small(P_s.tokens)
        el = dlf.large(P_l.tokens)
        deep, shallow = dlf(P_l, P_s)
    np.testing.assert_array_equal(
        deep.data.reshape(2, 32, 4).transpose(0, 2, 1), es.data[:, 1:]
    )
    np.testing.assert_array_equal(
        shallow.data.reshape(2, 8, 64).transpose(0, 2, 1), el.data[:, 1:]
    )
