"""Encoder-decoder generator conditioned on centre crops of encoder feature maps.

The encoder halves the 128x128 overhead image per layer (128 -> 64 -> 32 ->
16 -> 8).  A ``crop_size`` x ``crop_size`` window is cut from the centre of
the tapped layer(s): layer 2 for ``low``, 3 for ``mid``, 4 for ``high`` and
all three, channel-concatenated, for ``concat``.  Four transposed
convolutions then double the block back up to a 64x64x3 tanh image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import nn
from .core_types import GROUND_SIDE, OVERHEAD_SIDE, make_rng

VARIANTS = ("low", "mid", "high", "concat")
TAPS = {"low": (2,), "mid": (3,), "high": (4,), "concat": (2, 3, 4)}
BASE_WIDTHS = (8, 16, 32, 64)
PAPER_SCALE_MULTIPLIER = 8


@dataclass(frozen=True)
class GeneratorConfig:
    variant: str = "concat"
    width_multiplier: int = 1
    kernel_size: int = 5
    crop_size: int = 4
    # explicit encoder widths; overrides width_multiplier (used for gradient checks)
    widths: Optional[Tuple[int, int, int, int]] = None
    # >0 appends that many N(0, 1) channels to the conditioning block
    noise_channels: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.width_multiplier < 1:
            raise ValueError("width_multiplier must be a positive integer")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.widths is not None:
            object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
            if len(self.widths) != 4 or min(self.widths) < 1:
                raise ValueError("widths must be four positive integers")
        smallest = OVERHEAD_SIDE >> self.depth
        if not 1 <= self.crop_size <= smallest or self.crop_size % 2:
            raise ValueError(f"crop_size must be even and <= {smallest} for variant {self.variant!r}")
        if self.noise_channels < 0:
            raise ValueError("noise_channels must be >= 0")

    @property
    def pad(self):
        return self.kernel_size // 2

    @property
    def encoder_widths(self):
        return self.widths or tuple(w * self.width_multiplier for w in BASE_WIDTHS)

    @property
    def depth(self):
        return max(TAPS[self.variant])

    @property
    def block_channels(self):
        widths = self.encoder_widths
        return sum(widths[t - 1] for t in TAPS[self.variant])

    @property
    def decoder_widths(self):
        # mirrors the encoder: 4x4 -> 8x8 (w4) -> 16x16 (w3) -> 32x32 (w2) -> 64x64 (3)
        w = self.encoder_widths
        return (w[3], w[2], w[1], 3)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths) if self.widths else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("widths") is not None:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def encoder_layers(config):
    pad = config.pad
    return [
        nn.Layer(f"enc{i}", "conv", bn=i > 1, act="lrelu", pad=pad)
        for i in range(1, config.depth + 1)
    ]


def decoder_layers(config):
    pad = config.pad
    return [
        nn.Layer(f"dec{i}", "tconv", bn=i < 4, act="relu" if i < 4 else "tanh", pad=pad, output_pad=1)
        for i in range(1, 5)
    ]


def init_generator(config, seed, dtype=np.float32, init_std=0.02):
    """Weights ~ N(0, init_std), biases 0, batch-norm scale 1 / shift 0."""
    rng = make_rng(seed, 0x6E4)
    params = {}
    k = config.kernel_size
    cin = 3
    for layer, cout in zip(encoder_layers(config), config.encoder_widths):
        params.update(nn.init_layer(rng, layer, cin, cout, k, dtype, init_std))
        cin = cout
    cin = config.block_channels + config.noise_channels
    for layer, cout in zip(decoder_layers(config), config.decoder_widths):
        params.update(nn.init_layer(rng, layer, cin, cout, k, dtype, init_std))
        cin = cout
    return params


def _batched(x, side):
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != (side, side, 3):
        raise ValueError(f"expected images of shape {side}x{side}x3, got {x.shape[1:]}")
    return x, single


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def encode(params, config, overhead, mode="eval", new_buffers=None, return_caches=False):
    """Run the encoder ladder; returns one feature map per layer."""
    train = _check_mode(mode)
    x, single = _batched(overhead, OVERHEAD_SIDE)
    x = x.astype(params["enc1.weight"].dtype, copy=False)
    buffers = {} if new_buffers is None else new_buffers
    fmaps, caches = nn.chain_forward(params, encoder_layers(config), x, train, True, buffers)
    if single:
        fmaps = [f[0] for f in fmaps]
    return (fmaps, caches) if return_caches else fmaps


def crop_window(side, crop_size):
    lo = side // 2 - crop_size // 2
    return lo, lo + crop_size


def crop_center(fmap, crop_size=4):
    """Centre ``crop_size`` x ``crop_size`` window of an (…, H, W, C) map."""
    fmap = np.asarray(fmap)
    h, w = fmap.shape[-3], fmap.shape[-2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"feature map {h}x{w} smaller than crop {crop_size}")
    if h % 2 or w % 2:
        raise ValueError(f"feature map sides must be even, got {h}x{w}")
    r0, r1 = crop_window(h, crop_size)
    c0, c1 = crop_window(w, crop_size)
    return fmap[..., r0:r1, c0:c1, :]


def _block_from_fmaps(fmaps, config):
    crops = [crop_center(fmaps[t - 1], config.crop_size) for t in TAPS[config.variant]]
    return np.concatenate(crops, axis=-1) if len(crops) > 1 else crops[0]


def condition_block(params, config, overhead, mode="eval"):
    fmaps = encode(params, config, overhead, mode)
    return np.ascontiguousarray(_block_from_fmaps(fmaps, config))


def _append_noise(block, config, rng):
    if not config.noise_channels:
        return block
    if rng is None:
        raise ValueError("noise_channels > 0 requires an rng")
    z = rng.standard_normal(block.shape[:-1] + (config.noise_channels,)).astype(block.dtype)
    return np.concatenate([block, z], axis=-1)


def decode(params, config, block, mode="eval", new_buffers=None, return_caches=False):
    train = _check_mode(mode)
    block = np.asarray(block)
    single = block.ndim == 3
    if single:
        block = block[None]
    expected = (config.crop_size, config.crop_size, config.block_channels + config.noise_channels)
    if block.shape[1:] != expected:
        raise ValueError(f"block shape {block.shape[1:]} does not match variant (expected {expected})")
    buffers = {} if new_buffers is None else new_buffers
    outs, caches = nn.chain_forward(params, decoder_layers(config), block, train, True, buffers)
    img = outs[-1]
    if single:
        img = img[0]
    return (img, caches) if return_caches else img


def generate(params, config, overhead, mode="eval", rng=None):
    """Overhead image(s) -> synthesized ground view(s) in [-1, 1]."""
    block = condition_block(params, config, overhead, mode)
    return decode(params, config, _append_noise(block, config, rng), mode)


def generate_batches(params, config, overheads, batch_size=64, rng=None):
    """Eval-mode generation over a large stack of overhead images."""
    out = [generate(params, config, overheads[i : i + batch_size], "eval", rng)
           for i in range(0, len(overheads), batch_size)]
    return np.concatenate(out, axis=0)


# --- training-time forward/backward -------------------------------------------

def forward_train(params, config, overheads, rng=None):
    """Train-mode forward keeping everything needed for :func:`backward`.

    Returns ``(images, tape, new_buffers)``.
    """
    new_buffers = {}
    fmaps, enc_caches = encode(params, config, overheads, "train", new_buffers, return_caches=True)
    block = _append_noise(np.ascontiguousarray(_block_from_fmaps(fmaps, config)), config, rng)
    img, dec_caches = decode(params, config, block, "train", new_buffers, return_caches=True)
    tape = ([f.shape for f in fmaps], enc_caches, dec_caches)
    return img, tape, new_buffers


def backward(config, tape, dimg):
    """Gradients of all trainable generator parameters given d(loss)/d(image)."""
    fshapes, enc_caches, dec_caches = tape
    grads = {}
    dblock = nn.chain_backward(decoder_layers(config), dec_caches, grads, dout_last=dimg)
    injected = {}
    offset = 0
    for t in TAPS[config.variant]:
        shape = fshapes[t - 1]
        c = shape[-1]
        g = np.zeros(shape, dtype=dimg.dtype)
        r0, r1 = crop_window(shape[1], config.crop_size)
        c0, c1 = crop_window(shape[2], config.crop_size)
        g[:, r0:r1, c0:c1, :] = dblock[..., offset : offset + c]
        injected[t - 1] = g
        offset += c
    nn.chain_backward(encoder_layers(config), enc_caches, grads, injected=injected, need_dx=False)
    return grads


def param_count(params):
    return int(sum(v.size for k, v in params.items() if not nn.is_buffer(k)))
