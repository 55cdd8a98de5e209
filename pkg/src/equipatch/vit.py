"""Compact pre-norm vision transformer with pluggable patch embeddings.

Three embedding variants share one token contract: ``linear`` (the standard
single projection, realized as a patch-size convolution), ``conv_stack``
(sequential dense convolutions), and ``gmr_stack`` (sequential Gaussian-ring
convolutions, the equivariant option).  ``embed_tokens`` exposes the raw
embedding output -- before the cls token and positional embeddings are
applied -- which is the point where token-grid equivariance is measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gmr, tensorkit as tk
from .errors import ConfigError, ShapeError
from .tensorkit import Tensor

# stride/pad plans per embedding kernel configuration; total stride 16 on
# 224-input, scaling to a 4x4 grid on 64-input without any change
STAGE_PLANS: dict[str, tuple[tuple[int, int, int], ...]] = {
    "6,11": ((6, 4, 1), (11, 4, 4)),
    "8,9": ((8, 4, 2), (9, 4, 3)),
    "10,7": ((10, 4, 3), (7, 4, 2)),
    "12,5": ((12, 4, 4), (5, 4, 1)),
    "6,6,6": ((6, 4, 1), (6, 2, 2), (6, 2, 2)),
    "16": ((16, 16, 0),),
}


@dataclass(frozen=True)
class EmbedStage:
    kind: str  # "dense" | "gmr"
    k: int
    stride: int
    pad: int
    c_out: int

    def __post_init__(self):
        if self.kind not in ("dense", "gmr"):
            raise ConfigError(f"unknown stage kind {self.kind!r}")
        if self.stride < 1 or self.pad < 0 or self.c_out < 1 or self.k < 1:
            raise ConfigError(f"invalid stage geometry {self}")


@dataclass(frozen=True)
class PatchEmbedConfig:
    variant: str  # "linear" | "conv_stack" | "gmr_stack"
    stages: tuple[EmbedStage, ...] = ()
    patch: int = 16
    inter_stage_activation: str = "gelu"  # "gelu" | "none"; pointwise, so equivariance-safe
    sigma_ratio: float = gmr.DEFAULT_SIGMA_RATIO

    def __post_init__(self):
        if self.variant not in ("linear", "conv_stack", "gmr_stack"):
            raise ConfigError(f"unknown embedding variant {self.variant!r}")
        if self.inter_stage_activation not in ("gelu", "none"):
            raise ConfigError(f"unknown inter-stage activation {self.inter_stage_activation!r}")
        if self.variant == "linear":
            if self.patch < 1:
                raise ConfigError(f"patch must be >= 1, got {self.patch}")
        else:
            if not self.stages:
                raise ConfigError(f"{self.variant} requires at least one stage")
            expected = "gmr" if self.variant == "gmr_stack" else "dense"
            for st in self.stages:
                if st.kind != expected:
                    raise ConfigError(f"{self.variant} stage has kind {st.kind!r}")


@dataclass(frozen=True)
class ViTConfig:
    img_size: int
    in_channels: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float
    n_classes: int
    embed: PatchEmbedConfig

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed.variant != "linear" and self.embed.stages[-1].c_out != self.embed_dim:
            raise ConfigError(
                f"final stage c_out {self.embed.stages[-1].c_out} != embed_dim {self.embed_dim}"
            )
        g = token_grid(self)
        if g < 1:
            raise ConfigError(f"embedding geometry yields empty token grid for img_size {self.img_size}")


def token_grid(cfg: ViTConfig) -> int:
    """Side length of the square token grid implied by the embedding geometry."""
    if cfg.embed.variant == "linear":
        if cfg.img_size % cfg.embed.patch != 0:
            raise ConfigError(f"img_size {cfg.img_size} not divisible by patch {cfg.embed.patch}")
        return cfg.img_size // cfg.embed.patch
    size = cfg.img_size
    for st in cfg.embed.stages:
        size = (size + 2 * st.pad - st.k) // st.stride + 1
    return size


@dataclass
class ViTModel:
    cfg: ViTConfig
    params: dict[str, Tensor]
    bases: dict[int, gmr.GmrBasis] = field(default_factory=dict)

    @property
    def grid(self) -> int:
        return token_grid(self.cfg)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def replace_params(self, new: dict[str, Tensor]) -> None:
        for name, t in new.items():
            if t.shape != self.params[name].shape:
                raise ShapeError(f"parameter {name} shape changed: {t.shape}")
            self.params[name] = t


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- bound*std."""
    out = rng.standard_normal(shape)
    mask = np.abs(out) > bound
    while mask.any():
        out[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(out) > bound
    return (out * std).astype(np.float32)


def param_template(cfg: ViTConfig) -> dict[str, str]:
    """Ordered parameter name -> init class ('weight'|'zero'|'one') map."""
    names: dict[str, str] = {}
    emb = cfg.embed
    if emb.variant == "linear":
        names["embed.proj_w"] = "weight"
        names["embed.proj_b"] = "zero"
    else:
        for i, st in enumerate(emb.stages):
            if st.kind == "gmr":
                names[f"embed.stage{i}.ring_w"] = "weight"
            else:
                names[f"embed.stage{i}.w"] = "weight"
            names[f"embed.stage{i}.b"] = "zero"
    names["cls"] = "zero"
    names["pos"] = "zero"
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        names[f"{p}.ln1.g"] = "one"
        names[f"{p}.ln1.b"] = "zero"
        names[f"{p}.attn.qkv_w"] = "weight"
        names[f"{p}.attn.qkv_b"] = "zero"
        names[f"{p}.attn.proj_w"] = "weight"
        names[f"{p}.attn.proj_b"] = "zero"
        names[f"{p}.ln2.g"] = "one"
        names[f"{p}.ln2.b"] = "zero"
        names[f"{p}.mlp.fc1_w"] = "weight"
        names[f"{p}.mlp.fc1_b"] = "zero"
        names[f"{p}.mlp.fc2_w"] = "weight"
        names[f"{p}.mlp.fc2_b"] = "zero"
    names["norm.g"] = "one"
    names["norm.b"] = "zero"
    names["head.w"] = "weight"
    names["head.b"] = "zero"
    return names


def param_shape(cfg: ViTConfig, name: str) -> tuple[int, ...]:
    d = cfg.embed_dim
    hidden = int(round(d * cfg.mlp_ratio))
    g = token_grid(cfg)
    emb = cfg.embed
    if name == "embed.proj_w":
        return (d, cfg.in_channels, emb.patch, emb.patch)
    if name == "embed.proj_b":
        return (d,)
    if name.startswith("embed.stage"):
        idx = int(name.split("stage")[1].split(".")[0])
        st = emb.stages[idx]
        c_in = cfg.in_channels if idx == 0 else emb.stages[idx - 1].c_out
        if name.endswith(".ring_w"):
            return (st.c_out, c_in, gmr.ring_spec(st.k, emb.sigma_ratio).n_rings)
        if name.endswith(".w"):
            return (st.c_out, c_in, st.k, st.k)
        return (st.c_out,)
    if name == "cls":
        return (d,)
    if name == "pos":
        return (g * g + 1, d)
    if name.endswith(("ln1.g", "ln1.b", "ln2.g", "ln2.b", "norm.g", "norm.b")):
        return (d,)
    if name.endswith("attn.qkv_w"):
        return (d, 3 * d)
    if name.endswith("attn.qkv_b"):
        return (3 * d,)
    if name.endswith("attn.proj_w"):
        return (d, d)
    if name.endswith("attn.proj_b"):
        return (d,)
    if name.endswith("mlp.fc1_w"):
        return (d, hidden)
    if name.endswith("mlp.fc1_b"):
        return (hidden,)
    if name.endswith("mlp.fc2_w"):
        return (hidden, d)
    if name.endswith("mlp.fc2_b"):
        return (d,)
    if name == "head.w":
        return (d, cfg.n_classes)
    if name == "head.b":
        return (cfg.n_classes,)
    raise KeyError(name)


def build_model(cfg: ViTConfig, seed: int) -> ViTModel:
    """Deterministic init: trunc-normal(0.02) weights, zero biases/cls/pos, unit norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, kind in param_template(cfg).items():
        shape = param_shape(cfg, name)
        if kind == "weight":
            arr = _trunc_normal(rng, shape)
        elif kind == "one":
            arr = np.ones(shape, np.float32)
        else:
            arr = np.zeros(shape, np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    model = ViTModel(cfg=cfg, params=params)
    if cfg.embed.variant == "gmr_stack":
        for i, st in enumerate(cfg.embed.stages):
            model.bases[i] = gmr.build_basis(gmr.ring_spec(st.k, cfg.embed.sigma_ratio))
    return model


def _as_dtype(t: Tensor, dtype) -> Tensor:
    return t if t.dtype == dtype else t.astype(dtype)


def embed_tokens(model: ViTModel, images: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
    """Token grid [N, g*g, D] straight out of the embedding stack.

    Measured before the cls token and positional embeddings, row-major
    flattening of the spatial map.
    """
    cfg = model.cfg
    p = params if params is not None else model.params
    n, c, h, w = images.shape
    if h != cfg.img_size or w != cfg.img_size or c != cfg.in_channels:
        raise ShapeError(
            f"expected [N, {cfg.in_channels}, {cfg.img_size}, {cfg.img_size}] images, got {images.shape}"
        )
    dtype = images.dtype
    emb = cfg.embed
    if emb.variant == "linear":
        out = tk.conv2d(
            images, _as_dtype(p["embed.proj_w"], dtype), _as_dtype(p["embed.proj_b"], dtype),
            stride=emb.patch, pad=0,
        )
    else:
        out = images
        for i, st in enumerate(emb.stages):
            c_in = cfg.in_channels if i == 0 else emb.stages[i - 1].c_out
            if st.kind == "gmr":
                layer = gmr.GmrConvLayer(
                    spec=model.bases[i].spec, c_in=c_in, c_out=st.c_out,
                    ring_weights=_as_dtype(p[f"embed.stage{i}.ring_w"], dtype),
                    bias=_as_dtype(p[f"embed.stage{i}.b"], dtype),
                    stride=st.stride, pad=st.pad,
                )
                out = gmr.gmr_forward(out, layer, model.bases[i])
            else:
                out = tk.conv2d(
                    out, _as_dtype(p[f"embed.stage{i}.w"], dtype),
                    _as_dtype(p[f"embed.stage{i}.b"], dtype), st.stride, st.pad,
                )
            if i < len(emb.stages) - 1 and emb.inter_stage_activation == "gelu":
                out = tk.gelu(out)
    g = out.shape[-1]
    return tk.reshape(tk.transpose(out, (0, 2, 3, 1)), (n, g * g, cfg.embed_dim))


def forward(model: ViTModel, images: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
    """Class logits [N, n_classes]."""
    cfg = model.cfg
    p = params if params is not None else model.params
    dtype = images.dtype
    tokens = embed_tokens(model, images, params=p)
    n = tokens.shape[0]
    d = cfg.embed_dim
    cls = tk.broadcast_to(tk.reshape(_as_dtype(p["cls"], dtype), (1, 1, d)), (n, 1, d))
    x = tk.concat([cls, tokens], axis=1)
    x = tk.add(x, _as_dtype(p["pos"], dtype))
    heads = cfg.heads
    dh = d // heads
    scale = 1.0 / float(np.sqrt(dh))
    t = x.shape[1]
    for i in range(cfg.depth):
        blk = f"blocks.{i}"
        h = tk.layernorm(x, _as_dtype(p[f"{blk}.ln1.g"], dtype), _as_dtype(p[f"{blk}.ln1.b"], dtype))
        qkv = tk.linear(h, _as_dtype(p[f"{blk}.attn.qkv_w"], dtype), _as_dtype(p[f"{blk}.attn.qkv_b"], dtype))
        qkv = tk.transpose(tk.reshape(qkv, (n, t, 3, heads, dh)), (2, 0, 3, 1, 4))
        q, k_, v = qkv[0], qkv[1], qkv[2]
        att = tk.softmax(tk.mul(tk.matmul(q, tk.transpose(k_, (0, 1, 3, 2))), scale), axis=-1)
        ctx = tk.reshape(tk.transpose(tk.matmul(att, v), (0, 2, 1, 3)), (n, t, d))
        proj = tk.linear(ctx, _as_dtype(p[f"{blk}.attn.proj_w"], dtype), _as_dtype(p[f"{blk}.attn.proj_b"], dtype))
        x = tk.add(x, proj)
        h = tk.layernorm(x, _as_dtype(p[f"{blk}.ln2.g"], dtype), _as_dtype(p[f"{blk}.ln2.b"], dtype))
        h = tk.gelu(tk.linear(h, _as_dtype(p[f"{blk}.mlp.fc1_w"], dtype), _as_dtype(p[f"{blk}.mlp.fc1_b"], dtype)))
        h = tk.linear(h, _as_dtype(p[f"{blk}.mlp.fc2_w"], dtype), _as_dtype(p[f"{blk}.mlp.fc2_b"], dtype))
        x = tk.add(x, h)
    x = tk.layernorm(x, _as_dtype(p["norm.g"], dtype), _as_dtype(p["norm.b"], dtype))
    cls_out = x[:, 0]
    return tk.linear(cls_out, _as_dtype(p["head.w"], dtype), _as_dtype(p["head.b"], dtype))


def rot90_token_permutation(g: int, times: int) -> np.ndarray:
    """Index map aligning flattened tokens of a quarter-turned grid.

    ``flatten(rot90^times(grid))[perm] == flatten(grid)``; one
    counter-clockwise step sends grid cell (r, c) to (g-1-c, r).
    """
    if times not in (0, 1, 2, 3):
        raise ValueError(f"times must be in 0..3, got {times}")
    idx = np.arange(g * g)
    r, c = idx // g, idx % g
    for _ in range(times):
        r, c = g - 1 - c, r
    return r * g + c


def count_params(model: ViTModel) -> dict:
    """Exact parameter inventory with embedding byte accounting (f32)."""
    per: dict[str, int] = {}
    for name, t in model.params.items():
        per[name] = int(np.prod(t.shape)) if t.shape else 1
    embedding_total = sum(v for k, v in per.items() if k.startswith("embed."))
    return {
        "per_component": per,
        "embedding_total": embedding_total,
        "embedding_bytes": embedding_total * 4,
        "total": sum(per.values()),
    }


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def make_stages(plan_name: str, kind: str, channels: tuple[int, ...]) -> tuple[EmbedStage, ...]:
    plan = STAGE_PLANS[plan_name]
    if len(channels) != len(plan):
        raise ConfigError(f"plan {plan_name} has {len(plan)} stages, got {len(channels)} channel widths")
    return tuple(
        EmbedStage(kind=kind, k=k, stride=s, pad=p, c_out=c)
        for (k, s, p), c in zip(plan, channels)
    )


def stage_channels(plan_name: str, embed_dim: int) -> tuple[int, ...]:
    """Default mid-channel widths, scaled to the embedding dimension."""
    n_stages = len(STAGE_PLANS[plan_name])
    if n_stages == 1:
        return (embed_dim,)
    mids = (192,) if embed_dim >= 512 else (32,)
    if n_stages == 3:
        mids = (96, 192) if embed_dim >= 512 else (32, 64)
    return mids + (embed_dim,)


def tiny_config(variant: str = "gmr_stack", plan: str = "6,11", n_classes: int = 9) -> ViTConfig:
    """Desk-scale preset: 64px images, D=128, depth 4, heads 4."""
    embed_dim = 128
    if variant == "linear":
        emb = PatchEmbedConfig(variant="linear", patch=16)
    else:
        kind = "gmr" if variant == "gmr_stack" else "dense"
        emb = PatchEmbedConfig(variant=variant, stages=make_stages(plan, kind, stage_channels(plan, embed_dim)))
    return ViTConfig(
        img_size=64, in_channels=3, embed_dim=embed_dim, depth=4, heads=4,
        mlp_ratio=4.0, n_classes=n_classes, embed=emb,
    )


def base_config(variant: str = "gmr_stack", plan: str = "6,11", n_classes: int = 9) -> ViTConfig:
    """Counting/shape-check preset mirroring a 224px, D=768, depth 12 backbone."""
    embed_dim = 768
    if variant == "linear":
        emb = PatchEmbedConfig(variant="linear", patch=16)
    else:
        kind = "gmr" if variant == "gmr_stack" else "dense"
        emb = PatchEmbedConfig(variant=variant, stages=make_stages(plan, kind, stage_channels(plan, embed_dim)))
    return ViTConfig(
        img_size=224, in_channels=3, embed_dim=embed_dim, depth=12, heads=12,
        mlp_ratio=4.0, n_classes=n_classes, embed=emb,
    )


# ---------------------------------------------------------------------------
# architecture descriptor (de)serialization
# ---------------------------------------------------------------------------


def config_to_dict(cfg: ViTConfig) -> dict:
    return {
        "img_size": cfg.img_size,
        "in_channels": cfg.in_channels,
        "embed_dim": cfg.embed_dim,
        "depth": cfg.depth,
        "heads": cfg.heads,
        "mlp_ratio": cfg.mlp_ratio,
        "n_classes": cfg.n_classes,
        "embed": {
            "variant": cfg.embed.variant,
            "stages": [
                {"kind": s.kind, "k": s.k, "stride": s.stride, "pad": s.pad, "c_out": s.c_out}
                for s in cfg.embed.stages
            ],
            "patch": cfg.embed.patch,
            "inter_stage_activation": cfg.embed.inter_stage_activation,
            "sigma_ratio": cfg.embed.sigma_ratio,
        },
    }


def config_from_dict(d: dict) -> ViTConfig:
    try:
        emb_d = d["embed"]
        emb = PatchEmbedConfig(
            variant=emb_d["variant"],
            stages=tuple(EmbedStage(**s) for s in emb_d["stages"]),
            patch=emb_d["patch"],
            inter_stage_activation=emb_d["inter_stage_activation"],
            sigma_ratio=emb_d["sigma_ratio"],
        )
        return ViTConfig(
            img_size=d["img_size"], in_channels=d["in_channels"], embed_dim=d["embed_dim"],
            depth=d["depth"], heads=d["heads"], mlp_ratio=d["mlp_ratio"],
            n_classes=d["n_classes"], embed=emb,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed architecture descriptor: {exc}") from exc
