"""Reduced-scale hybrid network: shared stem, patch classifier, E-ASPP head.

One stem pass feeds both heads. The classifier reads the stem output
directly (conv + global average pool + two fully connected layers, 3
outputs). The segmentation trunk continues through three stages of
residual blocks; its final features enter an atrous spatial pyramid whose
extra branch mixes in the low-scale tap from the middle stage (zeroing
that branch's projection reproduces the plain pyramid exactly). Forward
passes are pure; training uses the *_train variants that return caches for
the hand-written backward.

Total downsampling is fixed at stride 8 (conv stride 2, pool 2, trunk
stride 2), so patch sizes must be divisible by 8.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (ConvSpec, Tensor, conv2d, conv2d_backward, global_avg_pool,
                     global_avg_pool_backward, linear, linear_backward, maxpool2d,
                     maxpool2d_backward, relu, relu_backward, subsample_nearest,
                     subsample_nearest_backward, upsample_nearest,
                     upsample_nearest_backward)

CHECKPOINT_MAGIC = "FOLLIPIPE1"
OUT_STRIDE = 8


@dataclass(frozen=True)
class ModelConfig:
    stem_width: int = 16
    trunk_widths: tuple[int, int, int] = (32, 64, 64)
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    aspp_width: int = 16
    fusion_width: int = 32
    cls_conv_width: int = 16
    cls_hidden: int = 16
    n_patch_classes: int = 3
    n_seg_classes: int = 2

    def __post_init__(self):
        widths = (self.stem_width, *self.trunk_widths, self.aspp_width,
                  self.fusion_width, self.cls_conv_width, self.cls_hidden)
        if any(w < 1 for w in widths):
            raise ValueError("all channel widths must be >= 1")
        if len(self.trunk_widths) != 3:
            raise ValueError("trunk_widths must name the three stage widths")
        if not self.aspp_rates or any(r < 1 for r in self.aspp_rates):
            raise ValueError("aspp_rates must be positive")


@dataclass
class ModelOutput:
    class_logits: Tensor  # [N, n_patch_classes]
    seg_logits: Tensor    # [N, n_seg_classes, P, P]


@dataclass
class HybridModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    counters: dict[str, int] = field(default_factory=lambda: {"stem_forward": 0})


def _stem_blocks(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    sw = cfg.stem_width
    return [("stem.block1", sw, sw, 1), ("stem.block2", sw, sw, 1)]


def _trunk_blocks(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    w2, w3, w4 = cfg.trunk_widths
    return [("trunk.b2a", cfg.stem_width, w2, 2), ("trunk.b2b", w2, w2, 1),
            ("trunk.b3a", w2, w3, 1), ("trunk.b3b", w3, w3, 1),
            ("trunk.b4a", w3, w4, 1), ("trunk.b4b", w4, w4, 1)]


def _aspp_in_channels(cfg: ModelConfig) -> int:
    # branches: 1x1, one per dilation rate, image-level, low-scale
    return (len(cfg.aspp_rates) + 3) * cfg.aspp_width


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) for every parameter; this order is the
    init order and the checkpoint blob order."""
    specs: list[tuple[str, tuple[int, ...], int]] = []

    def conv(name: str, in_ch: int, out_ch: int, k: int) -> None:
        specs.append((f"{name}.w", (out_ch, in_ch, k, k), in_ch * k * k))
        specs.append((f"{name}.b", (out_ch,), 0))

    def fc(name: str, in_f: int, out_f: int) -> None:
        specs.append((f"{name}.w", (in_f, out_f), in_f))
        specs.append((f"{name}.b", (out_f,), 0))

    def block(name: str, in_ch: int, out_ch: int, stride: int) -> None:
        conv(f"{name}.conv1", in_ch, out_ch, 3)
        conv(f"{name}.conv2", out_ch, out_ch, 3)
        if in_ch != out_ch or stride != 1:
            conv(f"{name}.proj", in_ch, out_ch, 1)

    conv("stem.conv0", 3, cfg.stem_width, 3)
    for name, in_ch, out_ch, stride in _stem_blocks(cfg):
        block(name, in_ch, out_ch, stride)
    for name, in_ch, out_ch, stride in _trunk_blocks(cfg):
        block(name, in_ch, out_ch, stride)

    conv("cls.conv", cfg.stem_width, cfg.cls_conv_width, 3)
    fc("cls.fc1", cfg.cls_conv_width, cfg.cls_hidden)
    fc("cls.fc2", cfg.cls_hidden, cfg.n_patch_classes)

    w3, w4 = cfg.trunk_widths[1], cfg.trunk_widths[2]
    conv("aspp.b0", w4, cfg.aspp_width, 1)
    for i in range(len(cfg.aspp_rates)):
        conv(f"aspp.dil{i}", w4, cfg.aspp_width, 3)
    conv("aspp.img", w4, cfg.aspp_width, 1)
    conv("aspp.low", w3, cfg.aspp_width, 1)
    conv("aspp.fuse", _aspp_in_channels(cfg), cfg.fusion_width, 1)
    conv("dec.proj", cfg.fusion_width, cfg.n_seg_classes, 1)
    return specs


def init_weights(seed: int, config: ModelConfig = ModelConfig()) -> HybridModel:
    """Fan-in-scaled uniform weights, zero biases, deterministic in seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in param_specs(config):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return HybridModel(config=config, params=params)


def n_parameters(model: HybridModel) -> int:
    return sum(p.size for p in model.params.values())


def _acc(grads: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


# ---------------------------------------------------------------- blocks

def _conv_spec(name: str, params: dict, in_ch: int, stride: int = 1,
               padding: int = 0, dilation: int = 1) -> ConvSpec:
    w = params[f"{name}.w"]
    return ConvSpec(kernel_h=w.shape[2], kernel_w=w.shape[3], stride=stride,
                    padding=padding, dilation=dilation, in_channels=in_ch,
                    out_channels=w.shape[0])


def _block_forward(model: HybridModel, name: str, x: Tensor, in_ch: int,
                   out_ch: int, stride: int):
    p = model.params
    spec1 = _conv_spec(f"{name}.conv1", p, in_ch, stride=stride, padding=1)
    spec2 = _conv_spec(f"{name}.conv2", p, out_ch, padding=1)
    h1 = conv2d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], spec1)
    a1 = relu(h1)
    h2 = conv2d(a1, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], spec2)
    if in_ch != out_ch or stride != 1:
        specp = _conv_spec(f"{name}.proj", p, in_ch, stride=stride)
        shortcut = conv2d(x, p[f"{name}.proj.w"], p[f"{name}.proj.b"], specp)
    else:
        shortcut = x
    return shortcut + h2, (x, h1, a1)


def _block_backward(model: HybridModel, name: str, grad_y: Tensor, cache,
                    in_ch: int, out_ch: int, stride: int,
                    grads: dict[str, np.ndarray]) -> Tensor:
    x, h1, a1 = cache
    p = model.params
    spec1 = _conv_spec(f"{name}.conv1", p, in_ch, stride=stride, padding=1)
    spec2 = _conv_spec(f"{name}.conv2", p, out_ch, padding=1)
    ga1, gw2, gb2 = conv2d_backward(grad_y, a1, p[f"{name}.conv2.w"], spec2)
    _acc(grads, f"{name}.conv2.w", gw2)
    _acc(grads, f"{name}.conv2.b", gb2)
    gh1 = relu_backward(ga1, h1)
    gx, gw1, gb1 = conv2d_backward(gh1, x, p[f"{name}.conv1.w"], spec1)
    _acc(grads, f"{name}.conv1.w", gw1)
    _acc(grads, f"{name}.conv1.b", gb1)
    if in_ch != out_ch or stride != 1:
        specp = _conv_spec(f"{name}.proj", p, in_ch, stride=stride)
        gxs, gwp, gbp = conv2d_backward(grad_y, x, p[f"{name}.proj.w"], specp)
        _acc(grads, f"{name}.proj.w", gwp)
        _acc(grads, f"{name}.proj.b", gbp)
        return gx + gxs
    return gx + grad_y


# ---------------------------------------------------------------- stem

def _stem_forward_train(model: HybridModel, x: Tensor):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"stem input must be [N,3,H,W], got shape {x.shape}")
    if x.shape[2] % OUT_STRIDE or x.shape[3] % OUT_STRIDE:
        raise ValueError(f"patch dims {x.shape[2]}x{x.shape[3]} must be divisible "
                         f"by {OUT_STRIDE}")
    model.counters["stem_forward"] += 1
    p = model.params
    spec0 = _conv_spec("stem.conv0", p, 3, stride=2, padding=1)
    h0 = conv2d(x, p["stem.conv0.w"], p["stem.conv0.b"], spec0)
    a0 = relu(h0)
    pooled = maxpool2d(a0, 2, 2)
    out = pooled
    block_caches = []
    for name, in_ch, out_ch, stride in _stem_blocks(model.config):
        out, cache = _block_forward(model, name, out, in_ch, out_ch, stride)
        block_caches.append(cache)
    return out, (x, h0, a0, pooled, block_caches)


def _stem_backward(model: HybridModel, grad_out: Tensor, cache,
                   grads: dict[str, np.ndarray]) -> Tensor:
    x, h0, a0, pooled, block_caches = cache
    g = grad_out
    for (name, in_ch, out_ch, stride), bc in zip(reversed(_stem_blocks(model.config)),
                                                 reversed(block_caches)):
        g = _block_backward(model, name, g, bc, in_ch, out_ch, stride, grads)
    g = maxpool2d_backward(g, a0, 2, 2)
    g = relu_backward(g, h0)
    spec0 = _conv_spec("stem.conv0", model.params, 3, stride=2, padding=1)
    gx, gw, gb = conv2d_backward(g, x, model.params["stem.conv0.w"], spec0)
    _acc(grads, "stem.conv0.w", gw)
    _acc(grads, "stem.conv0.b", gb)
    return gx


def stem_forward(model: HybridModel, patch: Tensor) -> Tensor:
    """Shared features at 1/4 resolution."""
    out, _ = _stem_forward_train(model, patch)
    return out


# ---------------------------------------------------------------- trunk

def _trunk_forward_train(model: HybridModel, shared: Tensor):
    out = shared
    block_caches = []
    low = None
    for name, in_ch, out_ch, stride in _trunk_blocks(model.config):
        out, cache = _block_forward(model, name, out, in_ch, out_ch, stride)
        block_caches.append(cache)
        if name == "trunk.b3b":
            low = out
    return out, low, block_caches


def _trunk_backward(model: HybridModel, grad_trunk: Tensor, grad_low: Tensor | None,
                    block_caches, grads: dict[str, np.ndarray]) -> Tensor:
    g = grad_trunk
    for (name, in_ch, out_ch, stride), bc in zip(reversed(_trunk_blocks(model.config)),
                                                 reversed(block_caches)):
        g = _block_backward(model, name, g, bc, in_ch, out_ch, stride, grads)
        if name == "trunk.b4a" and grad_low is not None:
            g = g + grad_low  # low-scale tap joins at the block-3 output
    return g


def trunk_forward(model: HybridModel, shared: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (trunk output, low-scale tap), both at 1/8 resolution."""
    out, low, _ = _trunk_forward_train(model, shared)
    return out, low


# ---------------------------------------------------------------- classifier

def _classify_forward_train(model: HybridModel, shared: Tensor):
    p = model.params
    cfg = model.config
    spec = _conv_spec("cls.conv", p, cfg.stem_width, padding=1)
    h = conv2d(shared, p["cls.conv.w"], p["cls.conv.b"], spec)
    a = relu(h)
    pooled = global_avg_pool(a)
    flat = pooled.reshape(shared.shape[0], cfg.cls_conv_width)
    f1 = linear(flat, p["cls.fc1.w"], p["cls.fc1.b"])
    a1 = relu(f1)
    logits = linear(a1, p["cls.fc2.w"], p["cls.fc2.b"])
    return logits, (shared, h, a, flat, f1, a1)


def _classify_backward(model: HybridModel, grad_logits: Tensor, cache,
                       grads: dict[str, np.ndarray]) -> Tensor:
    shared, h, a, flat, f1, a1 = cache
    p = model.params
    ga1, gw2, gb2 = linear_backward(grad_logits, a1, p["cls.fc2.w"])
    _acc(grads, "cls.fc2.w", gw2)
    _acc(grads, "cls.fc2.b", gb2)
    gf1 = relu_backward(ga1, f1)
    gflat, gw1, gb1 = linear_backward(gf1, flat, p["cls.fc1.w"])
    _acc(grads, "cls.fc1.w", gw1)
    _acc(grads, "cls.fc1.b", gb1)
    ga = global_avg_pool_backward(gflat.reshape(*gflat.shape, 1, 1), a.shape)
    gh = relu_backward(ga, h)
    spec = _conv_spec("cls.conv", p, model.config.stem_width, padding=1)
    gshared, gw, gb = conv2d_backward(gh, shared, p["cls.conv.w"], spec)
    _acc(grads, "cls.conv.w", gw)
    _acc(grads, "cls.conv.b", gb)
    return gshared


def classify(model: HybridModel, shared_features: Tensor) -> Tensor:
    """Raw 3-class logits from the shared stem output."""
    logits, _ = _classify_forward_train(model, shared_features)
    return logits


# ---------------------------------------------------------------- E-ASPP

def _broadcast_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Tile a [N,C,1,1] map to [N,C,h,w] (image-level branch)."""
    return np.broadcast_to(x, (x.shape[0], x.shape[1], h, w)).copy()


def _resize_to(x: Tensor, h: int, w: int):
    """Nearest resize to (h, w); only integer up/down factors are accepted.

    Returns (resized, mode, factor) where mode is 'same'/'up'/'down'.
    """
    xh, xw = x.shape[2], x.shape[3]
    if (xh, xw) == (h, w):
        return x, "same", 1
    if h % xh == 0 and w % xw == 0 and h // xh == w // xw:
        return upsample_nearest(x, h // xh), "up", h // xh
    if xh % h == 0 and xw % w == 0 and xh // h == xw // w:
        return subsample_nearest(x, xh // h), "down", xh // h
    raise ValueError(f"spatial mismatch after resize: low-scale {xh}x{xw} cannot be "
                     f"nearest-resized to pyramid resolution {h}x{w}")


def _resize_backward(grad: Tensor, in_shape, mode: str, factor: int) -> Tensor:
    if mode == "same":
        return grad
    if mode == "up":
        return upsample_nearest_backward(grad, factor)
    return subsample_nearest_backward(grad, in_shape, factor)


def _easpp_forward_train(model: HybridModel, trunk: Tensor, low: Tensor | None):
    """All pyramid branches concatenated and fused. low=None computes the
    plain pyramid using the matching leading slice of the fusion weights."""
    p = model.params
    cfg = model.config
    w4 = cfg.trunk_widths[2]
    if trunk.ndim != 4 or trunk.shape[1] != w4:
        raise ValueError(f"trunk features must be [N,{w4},S,S], got shape {trunk.shape}")
    n, _, sh, sw = trunk.shape
    branches = []
    cache: dict = {"trunk": trunk, "low": low, "hw": (sh, sw)}

    h0 = conv2d(trunk, p["aspp.b0.w"], p["aspp.b0.b"], _conv_spec("aspp.b0", p, w4))
    cache["h0"] = h0
    branches.append(relu(h0))

    cache["hdil"] = []
    for i, rate in enumerate(cfg.aspp_rates):
        spec = _conv_spec(f"aspp.dil{i}", p, w4, padding=rate, dilation=rate)
        hd = conv2d(trunk, p[f"aspp.dil{i}.w"], p[f"aspp.dil{i}.b"], spec)
        cache["hdil"].append(hd)
        branches.append(relu(hd))

    pooled = global_avg_pool(trunk)
    himg = conv2d(pooled, p["aspp.img.w"], p["aspp.img.b"], _conv_spec("aspp.img", p, w4))
    cache["pooled"], cache["himg"] = pooled, himg
    branches.append(_broadcast_hw(relu(himg), sh, sw))

    if low is not None:
        if low.ndim != 4 or low.shape[0] != n or low.shape[1] != cfg.trunk_widths[1]:
            raise ValueError(f"low-scale features must be [N,{cfg.trunk_widths[1]},h,w], "
                             f"got shape {low.shape}")
        hlow = conv2d(low, p["aspp.low.w"], p["aspp.low.b"],
                      _conv_spec("aspp.low", p, cfg.trunk_widths[1]))
        alow = relu(hlow)
        resized, mode, factor = _resize_to(alow, sh, sw)
        cache["hlow"], cache["alow_shape"] = hlow, alow.shape
        cache["resize"] = (mode, factor)
        branches.append(resized)

    cat = np.concatenate(branches, axis=1)
    fuse_w = p["aspp.fuse.w"]
    if low is None:
        fuse_w = fuse_w[:, :cat.shape[1]]
    fuse_spec = ConvSpec(1, 1, in_channels=cat.shape[1], out_channels=cfg.fusion_width)
    hfuse = conv2d(cat, fuse_w, p["aspp.fuse.b"], fuse_spec)
    cache["cat"], cache["hfuse"] = cat, hfuse
    return relu(hfuse), cache


def _easpp_backward(model: HybridModel, grad_fused: Tensor, cache,
                    grads: dict[str, np.ndarray]):
    p = model.params
    cfg = model.config
    w4 = cfg.trunk_widths[2]
    trunk, low = cache["trunk"], cache["low"]
    sh, sw = cache["hw"]
    aw = cfg.aspp_width

    ghfuse = relu_backward(grad_fused, cache["hfuse"])
    cat = cache["cat"]
    fuse_spec = ConvSpec(1, 1, in_channels=cat.shape[1], out_channels=cfg.fusion_width)
    fuse_w = p["aspp.fuse.w"][:, :cat.shape[1]] if low is None else p["aspp.fuse.w"]
    gcat, gwf, gbf = conv2d_backward(ghfuse, cat, fuse_w, fuse_spec)
    if low is None:
        gwf_full = np.zeros_like(p["aspp.fuse.w"])
        gwf_full[:, :cat.shape[1]] = gwf
        gwf = gwf_full
    _acc(grads, "aspp.fuse.w", gwf)
    _acc(grads, "aspp.fuse.b", gbf)

    grad_trunk = np.zeros_like(trunk)
    off = 0

    gh0 = relu_backward(gcat[:, off:off + aw], cache["h0"])
    gt, gw, gb = conv2d_backward(gh0, trunk, p["aspp.b0.w"], _conv_spec("aspp.b0", p, w4))
    _acc(grads, "aspp.b0.w", gw)
    _acc(grads, "aspp.b0.b", gb)
    grad_trunk += gt
    off += aw

    for i, rate in enumerate(cfg.aspp_rates):
        ghd = relu_backward(gcat[:, off:off + aw], cache["hdil"][i])
        spec = _conv_spec(f"aspp.dil{i}", p, w4, padding=rate, dilation=rate)
        gt, gw, gb = conv2d_backward(ghd, trunk, p[f"aspp.dil{i}.w"], spec)
        _acc(grads, f"aspp.dil{i}.w", gw)
        _acc(grads, f"aspp.dil{i}.b", gb)
        grad_trunk += gt
        off += aw

    gimg = gcat[:, off:off + aw].sum(axis=(2, 3), keepdims=True)  # broadcast adjoint
    ghimg = relu_backward(gimg, cache["himg"])
    gpooled, gw, gb = conv2d_backward(ghimg, cache["pooled"], p["aspp.img.w"],
                                      _conv_spec("aspp.img", p, w4))
    _acc(grads, "aspp.img.w", gw)
    _acc(grads, "aspp.img.b", gb)
    grad_trunk += global_avg_pool_backward(gpooled, trunk.shape)
    off += aw

    grad_low = None
    if low is not None:
        mode, factor = cache["resize"]
        galow = _resize_backward(gcat[:, off:off + aw], cache["alow_shape"], mode, factor)
        ghlow = relu_backward(galow, cache["hlow"])
        grad_low, gw, gb = conv2d_backward(ghlow, low, p["aspp.low.w"],
                                           _conv_spec("aspp.low", p, cfg.trunk_widths[1]))
        _acc(grads, "aspp.low.w", gw)
        _acc(grads, "aspp.low.b", gb)
    return grad_trunk, grad_low


def easpp_forward(model: HybridModel, trunk_features: Tensor,
                  lowscale_features: Tensor) -> Tensor:
    """Pyramid over trunk features plus the projected low-scale branch."""
    fused, _ = _easpp_forward_train(model, trunk_features, lowscale_features)
    return fused


def aspp_forward(model: HybridModel, trunk_features: Tensor) -> Tensor:
    """Plain pyramid (no low-scale branch); equals easpp_forward when the
    low-scale projection weights are zero."""
    fused, _ = _easpp_forward_train(model, trunk_features, None)
    return fused


# ---------------------------------------------------------------- decoder

def _decoder_forward_train(model: HybridModel, fused: Tensor):
    p = model.params
    spec = _conv_spec("dec.proj", p, model.config.fusion_width)
    proj = conv2d(fused, p["dec.proj.w"], p["dec.proj.b"], spec)
    return upsample_nearest(proj, OUT_STRIDE), (fused,)


def _decoder_backward(model: HybridModel, grad_seg: Tensor, cache,
                      grads: dict[str, np.ndarray]) -> Tensor:
    (fused,) = cache
    gproj = upsample_nearest_backward(grad_seg, OUT_STRIDE)
    spec = _conv_spec("dec.proj", model.params, model.config.fusion_width)
    gfused, gw, gb = conv2d_backward(gproj, fused, model.params["dec.proj.w"], spec)
    _acc(grads, "dec.proj.w", gw)
    _acc(grads, "dec.proj.b", gb)
    return gfused


def segment(model: HybridModel, trunk_features: Tensor,
            lowscale_features: Tensor) -> Tensor:
    """Per-pixel logits at patch resolution: fuse, project to the two
    segmentation classes, nearest-upsample by the output stride."""
    fused, _ = _easpp_forward_train(model, trunk_features, lowscale_features)
    seg, _ = _decoder_forward_train(model, fused)
    return seg


# ---------------------------------------------------------------- full model

def model_forward(model: HybridModel, patch: Tensor) -> ModelOutput:
    """One shared stem pass feeding both heads."""
    out, _ = model_forward_train(model, patch)
    return out


def model_forward_train(model: HybridModel, patch: Tensor):
    shared, stem_cache = _stem_forward_train(model, patch)
    cls_logits, cls_cache = _classify_forward_train(model, shared)
    trunk_out, low, trunk_cache = _trunk_forward_train(model, shared)
    fused, easpp_cache = _easpp_forward_train(model, trunk_out, low)
    seg_logits, dec_cache = _decoder_forward_train(model, fused)
    output = ModelOutput(class_logits=cls_logits, seg_logits=seg_logits)
    return output, (stem_cache, cls_cache, trunk_cache, easpp_cache, dec_cache)


def model_backward(model: HybridModel, grad_cls: Tensor | None,
                   grad_seg: Tensor | None, caches) -> tuple[dict[str, np.ndarray], Tensor]:
    """Accumulate parameter gradients from both heads; either upstream
    gradient may be None to drop that head. Returns (grads, grad_input)."""
    stem_cache, cls_cache, trunk_cache, easpp_cache, dec_cache = caches
    grads: dict[str, np.ndarray] = {}
    shared_shape = cls_cache[0].shape
    grad_shared = np.zeros(shared_shape, dtype=np.float64)
    if grad_seg is not None:
        gfused = _decoder_backward(model, grad_seg, dec_cache, grads)
        gtrunk, glow = _easpp_backward(model, gfused, easpp_cache, grads)
        grad_shared += _trunk_backward(model, gtrunk, glow, trunk_cache, grads)
    if grad_cls is not None:
        grad_shared += _classify_backward(model, grad_cls, cls_cache, grads)
    grad_input = _stem_backward(model, grad_shared, stem_cache, grads)
    return grads, grad_input


def forward_kink_margin(model: HybridModel, patch: Tensor) -> float:
    """Distance of the forward pass from relu/maxpool nondifferentiabilities:
    min |relu pre-activation| and min max-vs-runner-up pool gap. Finite
    difference checks need inputs whose margin clears the probe step."""
    from .tensor import _pool_cols  # intra-package use of the tap gatherer

    _, caches = model_forward_train(model, patch)
    stem_cache, cls_cache, trunk_cache, easpp_cache, _ = caches
    margins = []

    def relu_margin(h):
        margins.append(float(np.abs(h).min()))

    x, h0, a0, pooled, stem_blocks = stem_cache
    relu_margin(h0)
    oh, ow = a0.shape[2] // 2, a0.shape[3] // 2
    cols = _pool_cols(a0, 2, 2, oh, ow)
    top2 = np.sort(cols, axis=2)[:, :, -2:]
    active = top2[:, :, 1] > 1e-12  # all-zero windows cannot flip
    if active.any():
        gaps = (top2[:, :, 1] - top2[:, :, 0])[active]
        margins.append(float(gaps.min()))
    for _, h1, _ in stem_blocks:
        relu_margin(h1)
    relu_margin(cls_cache[1])  # classifier conv pre-activation
    relu_margin(cls_cache[4])  # classifier fc1 pre-activation
    for _, h1, _ in trunk_cache:
        relu_margin(h1)
    relu_margin(easpp_cache["h0"])
    for hd in easpp_cache["hdil"]:
        relu_margin(hd)
    relu_margin(easpp_cache["himg"])
    relu_margin(easpp_cache["hlow"])
    relu_margin(easpp_cache["hfuse"])
    return min(margins)


def zero_lowscale_branch(model: HybridModel) -> HybridModel:
    """Copy of the model with the low-scale projection zeroed (ablation switch)."""
    params = {k: v.copy() for k, v in model.params.items()}
    params["aspp.low.w"][:] = 0.0
    params["aspp.low.b"][:] = 0.0
    return HybridModel(config=model.config, params=params)


# ---------------------------------------------------------------- checkpoints

_META_FIELDS = ("stem_width", "trunk_widths", "aspp_rates", "aspp_width",
                "fusion_width", "cls_conv_width", "cls_hidden",
                "n_patch_classes", "n_seg_classes")


def save_checkpoint(path: str | Path, model: HybridModel) -> None:
    """Magic line, UTF-8 header (meta + tensor name/shape lines), END marker,
    then little-endian float64 blobs in header order."""
    cfg = model.config
    lines = [CHECKPOINT_MAGIC]
    for f in _META_FIELDS:
        value = getattr(cfg, f)
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"meta {f} {value}")
    for name, arr in model.params.items():
        lines.append(f"tensor {name} {'x'.join(map(str, arr.shape))}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    blobs = b"".join(arr.astype("<f8").tobytes() for arr in model.params.values())
    Path(path).write_bytes(header + blobs)


def load_checkpoint(path: str | Path) -> HybridModel:
    path = Path(path)
    data = path.read_bytes()
    marker = b"\nEND\n"
    end = data.find(marker)
    if end < 0:
        raise ValueError(f"{path}: missing END marker; not a valid checkpoint")
    header_lines = data[:end].decode("utf-8").split("\n")
    if header_lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {header_lines[0]!r}, "
                         f"expected {CHECKPOINT_MAGIC!r}")
    meta: dict[str, str] = {}
    tensors: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, shape_s = rest.rsplit(" ", 1)
            tensors.append((name, tuple(int(d) for d in shape_s.split("x"))))
        else:
            raise ValueError(f"{path}: unknown header line kind {kind!r}")
    missing = [f for f in _META_FIELDS if f not in meta]
    if missing:
        raise ValueError(f"{path}: header missing meta fields {missing}")
    cfg = ModelConfig(
        stem_width=int(meta["stem_width"]),
        trunk_widths=tuple(int(v) for v in meta["trunk_widths"].split(",")),
        aspp_rates=tuple(int(v) for v in meta["aspp_rates"].split(",")),
        aspp_width=int(meta["aspp_width"]),
        fusion_width=int(meta["fusion_width"]),
        cls_conv_width=int(meta["cls_conv_width"]),
        cls_hidden=int(meta["cls_hidden"]),
        n_patch_classes=int(meta["n_patch_classes"]),
        n_seg_classes=int(meta["n_seg_classes"]),
    )
    expected = [(name, shape) for name, shape, _ in param_specs(cfg)]
    if tensors != expected:
        raise ValueError(f"{path}: header tensor list does not match the "
                         f"architecture for its config")
    params: dict[str, np.ndarray] = {}
    offset = end + len(marker)
    for name, shape in tensors:
        count = int(np.prod(shape))
        nbytes = count * 8
        raw = data[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise ValueError(f"{path}: truncated blob for tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after blobs")
    return HybridModel(config=cfg, params=params)
