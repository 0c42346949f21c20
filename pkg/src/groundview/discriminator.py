"""Conditional discriminator and its 1024-D feature-extractor form.

The overhead image is reduced 128 -> 64 by one strided convolution and
channel-concatenated with the 64x64 ground image.  Four strided trunk layers
take that to 4x4, a 1x1 convolution widens it to 1024 channels, and global
average pooling gives the feature vector.  A linear map plus sigmoid turns
the features into the real/fake probability.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .core_types import GROUND_SIDE, OVERHEAD_SIDE, make_rng
from .generator import GeneratorConfig, _batched, _check_mode

FEATURE_DIM = 1024


def trunk_layers(config):
    pad = config.pad
    return [nn.Layer(f"trunk{i}", "conv", bn=i > 1, act="lrelu", pad=pad) for i in range(1, 5)]


def overhead_layer(config):
    return nn.Layer("overhead", "conv", bn=False, act="lrelu", pad=config.pad)


HEAD = nn.Layer("head", "conv", bn=False, act="lrelu", stride=1, pad=0)


def init_discriminator(config: GeneratorConfig, seed, dtype=np.float32, init_std=0.02):
    """Discriminator sized from the generator's width schedule."""
    rng = make_rng(seed, 0xD15)
    k = config.kernel_size
    w = config.encoder_widths
    params = {}
    params.update(nn.init_layer(rng, overhead_layer(config), 3, w[0], k, dtype, init_std))
    cin = w[0] + 3
    for layer, cout in zip(trunk_layers(config), w):
        params.update(nn.init_layer(rng, layer, cin, cout, k, dtype, init_std))
        cin = cout
    params.update(nn.init_layer(rng, HEAD, cin, FEATURE_DIM, 1, dtype, init_std))
    params["out.weight"] = rng.normal(0.0, init_std, size=FEATURE_DIM).astype(dtype)
    params["out.bias"] = np.zeros(1, dtype=dtype)
    return params


def _inputs(params, ground, overhead):
    g, single_g = _batched(ground, GROUND_SIDE)
    o, single_o = _batched(overhead, OVERHEAD_SIDE)
    if len(g) != len(o):
        raise ValueError(f"{len(g)} ground images but {len(o)} overhead images")
    dtype = params["out.weight"].dtype
    return g.astype(dtype, copy=False), o.astype(dtype, copy=False), single_g and single_o


def reduce_overhead(params, config, overhead):
    """The overhead-reduction stage alone; shareable between real and fake passes."""
    o, _ = _batched(overhead, OVERHEAD_SIDE)
    o = o.astype(params["out.weight"].dtype, copy=False)
    return nn.layer_forward(params, overhead_layer(config), o, False, False, {})


def features_forward(params, config, ground, overhead, train, update_stats=True,
                     new_buffers=None, reduced=None):
    """Pooled head activations plus the tape for :func:`features_backward`.

    ``reduced`` may carry a precomputed ``reduce_overhead`` result.
    """
    h, tape = _head_forward(params, config, ground, overhead, train, update_stats, new_buffers,
                            reduced)
    return h.mean(axis=(1, 2)), tape


def _head_forward(params, config, ground, overhead, train, update_stats, new_buffers, reduced):
    g, o, _ = _inputs(params, ground, overhead)
    buffers = {} if new_buffers is None else new_buffers
    if reduced is None:
        reduced = reduce_overhead(params, config, o)
    r, r_cache = reduced
    x = np.concatenate([r, g], axis=-1)
    outs, trunk_caches = nn.chain_forward(params, trunk_layers(config), x, train, update_stats, buffers)
    h, head_cache = nn.layer_forward(params, HEAD, outs[-1], train, update_stats, buffers)
    return h, (r.shape[-1], r_cache, trunk_caches, head_cache, h.shape)


def head_activations(params, config, ground, overhead, mode="eval"):
    """The 4x4x1024 head map that global average pooling reduces to features."""
    h, _ = _head_forward(params, config, ground, overhead, _check_mode(mode), False, None, None)
    return h


def features_backward(config, tape, dfeats, grads, need_input=True):
    """Backpropagate d(loss)/d(features) through head and trunk.

    Returns the gradient w.r.t. the concatenated ``[reduced overhead, ground]``
    trunk input, or None.  Pass ``grads=None`` to skip parameter gradients.
    """
    _, _, trunk_caches, head_cache, hshape = tape
    n, hh, hw, _ = hshape
    dh = np.ascontiguousarray(np.broadcast_to(dfeats[:, None, None, :] / (hh * hw), hshape))
    dt = nn.layer_backward(HEAD, dh, head_cache, grads)
    return nn.chain_backward(trunk_layers(config), trunk_caches, grads, dout_last=dt,
                             need_dx=need_input)


def overhead_backward(config, tape, d_trunk_input, grads):
    """Finish backprop into the overhead-reduction weights."""
    r_channels, r_cache = tape[0], tape[1]
    d_reduced = np.ascontiguousarray(d_trunk_input[..., :r_channels])
    nn.layer_backward(overhead_layer(config), d_reduced, r_cache, grads, need_dx=False)


def ground_grad(tape, d_trunk_input):
    return d_trunk_input[..., tape[0]:]


def linear(params, feats):
    """Pre-sigmoid score from pooled features."""
    return feats @ params["out.weight"] + params["out.bias"][0]


def extract_features_from_pair(params, config, ground, overhead, mode="eval"):
    train = _check_mode(mode)
    _, _, single = _inputs(params, ground, overhead)
    feats, _ = features_forward(params, config, ground, overhead, train, update_stats=False)
    return feats[0] if single else feats


def discriminate_logit(params, config, ground, overhead, mode="eval"):
    return linear(params, extract_features_from_pair(params, config, ground, overhead, mode))


def discriminate(params, config, ground, overhead, mode="eval"):
    """Probability that ``ground`` is the real view of ``overhead``."""
    logit = np.asarray(discriminate_logit(params, config, ground, overhead, mode))
    if not np.isfinite(logit).all():
        raise nn.NonFiniteActivation("out")
    return nn.sigmoid(np.atleast_1d(logit)).reshape(logit.shape)


def extract_features(gen_params, gen_config, disc_params, overhead, ground_slot="generated",
                     batch_size=64):
    """1024-D descriptor of overhead image(s).

    ``ground_slot`` chooses what fills the discriminator's ground input:
    ``generated`` (the generator's view of the same overhead) or ``zeros``.
    """
    from .generator import generate

    o, single = _batched(overhead, OVERHEAD_SIDE)
    chunks = []
    for i in range(0, len(o), batch_size):
        ob = o[i : i + batch_size]
        if ground_slot == "generated":
            g = generate(gen_params, gen_config, ob, "eval")
        elif ground_slot == "zeros":
            g = np.zeros((len(ob), GROUND_SIDE, GROUND_SIDE, 3), dtype=ob.dtype)
        else:
            raise ValueError(f"ground_slot must be 'generated' or 'zeros', got {ground_slot!r}")
        chunks.append(extract_features_from_pair(disc_params, gen_config, g, ob, "eval"))
    feats = np.concatenate(chunks, axis=0)
    return feats[0] if single else feats
