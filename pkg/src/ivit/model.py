"""Dual-pathway vision transformer with gated attention fusion.

Each block computes two attention tensors from shared keys: the visual one
from the original queries and a guided one from an extra set of interaction
queries whose class-row distribution is supervised by teacher maps during
finetuning. A per-row gate network mixes the two row distributions into the
fused tensor that modulates the values.

Parameters live in a flat name -> ndarray dict; ``forward`` wraps them in
graph leaves so the same code serves training (with gradients) and
evaluation (without).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat

GATE_MODES = ("sigmoid", "convex")
FREEZE_POLICIES = ("pretrain", "interaction-finetune")

CKPT_MAGIC = b"IVIT"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    layers: int = 6
    classes: int = 10
    gate_mode: str = "sigmoid"
    gcn_hidden: int = 16
    channels: int = 1

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        for name in ("patch_size", "embed_dim", "heads", "layers", "classes", "gcn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return self.num_patches + 1  # class token at index 0

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def ffn_hidden(self) -> int:
        return 2 * self.embed_dim


@dataclass
class LayerTrace:
    """Per-layer attention record; guided is None when the pathway is off."""

    visual: np.ndarray            # (B, H, T, T)
    guided: np.ndarray | None     # (B, H, T, T)
    fused: np.ndarray             # (B, H, T, T)
    gates: np.ndarray             # (B, H, T, 2), fixed values when the gate net is off
    guided_t: Tensor | None = None  # graph node for the alignment loss
    visual_t: Tensor | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    trace: list[LayerTrace]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0,
                dtype: np.dtype = np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter set. Interaction queries start at W_q plus tiny noise
    so the guided pathway opens near the visual one."""
    rng = np.random.default_rng(seed)
    d, t = cfg.embed_dim, cfg.tokens
    p: dict[str, np.ndarray] = {}

    def xavier(fan_in, fan_out):
        # Plain SGD needs signal-preserving scales; tiny uniform-std init
        # leaves the image pathway orders of magnitude below the static one.
        std = np.sqrt(2.0 / (fan_in + fan_out))
        return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)

    def normal(*shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    p["cls"] = normal(d)
    p["patch_w"] = xavier(cfg.patch_pixels, d)
    p["patch_b"] = zeros(d)
    p["pos"] = normal(t, d)
    for i in range(cfg.layers):
        pre = f"l{i}."
        p[pre + "ln1_s"] = ones(d)
        p[pre + "ln1_b"] = zeros(d)
        p[pre + "wq"] = xavier(d, d)
        p[pre + "wk"] = xavier(d, d)
        p[pre + "wv"] = xavier(d, d)
        p[pre + "wo"] = xavier(d, d)
        p[pre + "wo_b"] = zeros(d)
        p[pre + "ln2_s"] = ones(d)
        p[pre + "ln2_b"] = zeros(d)
        p[pre + "ffn_w1"] = xavier(d, cfg.ffn_hidden)
        p[pre + "ffn_b1"] = zeros(cfg.ffn_hidden)
        p[pre + "ffn_w2"] = xavier(cfg.ffn_hidden, d)
        p[pre + "ffn_b2"] = zeros(d)
        p[pre + "wq2"] = zeros(d, d)  # synced from wq below
        p[pre + "gate_w1"] = xavier(2 * t, cfg.gcn_hidden)
        p[pre + "gate_b1"] = zeros(cfg.gcn_hidden)
        p[pre + "gate_w2"] = xavier(cfg.gcn_hidden, 2)
        p[pre + "gate_b2"] = zeros(2)
    p["head_ln_s"] = ones(d)
    p["head_ln_b"] = zeros(d)
    p["head_w"] = xavier(d, cfg.classes)
    p["head_b"] = zeros(cfg.classes)
    sync_interaction_queries(p, cfg, seed=seed + 1)
    return p


def sync_interaction_queries(params: dict[str, np.ndarray], cfg: ModelConfig,
                             seed: int = 0, std: float = 1e-3) -> None:
    """Reset each layer's interaction queries to its original queries plus
    N(0, std) noise, so the guided attention starts near the visual one."""
    rng = np.random.default_rng(seed)
    for i in range(cfg.layers):
        wq = params[f"l{i}.wq"]
        noise = (rng.standard_normal(wq.shape) * std).astype(wq.dtype)
        params[f"l{i}.wq2"] = wq + noise


def freeze_mask(params: dict[str, np.ndarray],
                policy: str) -> dict[str, bool]:
    """Trainable flag per parameter under the named stage policy.

    pretrain: the interaction pathway (interaction queries, gate nets) is
    excluded, everything else trains. interaction-finetune: only the
    interaction queries, gate nets, and the task head train.
    """
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}")
    interaction = lambda name: ".wq2" in name or ".gate_" in name
    head = lambda name: name in ("head_w", "head_b")
    mask = {}
    for name in params:
        if policy == "pretrain":
            mask[name] = not interaction(name)
        else:
            mask[name] = interaction(name) or head(name)
    return mask


def as_leaves(params: dict[str, np.ndarray],
              trainable: dict[str, bool] | None = None) -> dict[str, Tensor]:
    """Wrap parameters as graph leaves; frozen ones build no backward links."""
    return {
        name: Tensor(arr, requires_grad=bool(trainable and trainable.get(name)), name=name)
        for name, arr in params.items()
    }


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, H, W[, C]) images -> (B, N, patch_pixels) rows, row-major patches."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
        raise ValueError(
            f"image shape {(h, w, c)} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
    g, ps = cfg.grid, cfg.patch_size
    x = images.reshape(b, g, ps, g, ps, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (B, gh, gw, ps, ps, C)
    return x.reshape(b, cfg.num_patches, cfg.patch_pixels)


def patch_embed(images: np.ndarray, leaves: dict[str, Tensor],
                cfg: ModelConfig) -> Tensor:
    """Tokens: learned class token at index 0, then projected patches; all
    get learned positional embeddings."""
    dtype = leaves["patch_w"].dtype
    patches = patchify(images, cfg).astype(dtype)
    b = patches.shape[0]
    tok = Tensor(patches) @ leaves["patch_w"] + leaves["patch_b"]  # (B, N, D)
    cls = leaves["cls"].reshape(1, 1, cfg.embed_dim) * np.ones((b, 1, 1), dtype=dtype)
    x = concat([cls, tok], axis=1)
    return x + leaves["pos"]


def _split_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, t, _ = x.shape
    return x.reshape(b, t, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    b = x.shape[0]
    return x.transpose(0, 2, 1, 3).reshape(b, cfg.tokens, cfg.embed_dim)


def dual_attention(h: Tensor, leaves: dict[str, Tensor], cfg: ModelConfig,
                   layer: int, with_guided: bool = True
                   ) -> tuple[Tensor, Tensor | None, Tensor]:
    """Row-stochastic attention from both query pathways over shared keys.

    Returns (visual, guided, values-per-head); guided is None when the
    interaction-query pathway is disabled.
    """
    pre = f"l{layer}."
    q = _split_heads(h @ leaves[pre + "wq"], cfg)
    k = _split_heads(h @ leaves[pre + "wk"], cfg)
    v = _split_heads(h @ leaves[pre + "wv"], cfg)
    kt = k.transpose(0, 1, 3, 2)
    scale = 1.0 / float(np.sqrt(cfg.head_dim))
    visual = ((q @ kt) * scale).softmax_rows()
    guided = None
    if with_guided:
        q2 = _split_heads(h @ leaves[pre + "wq2"], cfg)
        guided = ((q2 @ kt) * scale).softmax_rows()
    return visual, guided, v


def gated_fusion(guided: Tensor, visual: Tensor, leaves: dict[str, Tensor],
                 cfg: ModelConfig, layer: int,
                 gate_override: tuple[float, float] | None = None,
                 ) -> tuple[Tensor, Tensor | np.ndarray]:
    """Mix the two attention tensors row by row through the gate network.

    Each row's gate input is its guided and visual distributions side by
    side (length 2T); two affine maps produce a pair of logits, squashed by
    sigmoid (independent gates) or softmax (convex weights). With
    ``gate_override`` the gate net is bypassed and the fixed pair is used.
    """
    if gate_override is not None:
        g1, g2 = gate_override
        fused = guided * g1 + visual * g2
        b, hh, t, _ = visual.shape
        gates = np.broadcast_to(
            np.asarray([g1, g2], dtype=visual.dtype), (b, hh, t, 2))
        return fused, gates
    pre = f"l{layer}."
    t = cfg.tokens
    # Row input is [guided_row ; visual_row] (length 2T); splitting the
    # first gate weight matrix instead of concatenating the inputs computes
    # the same affine map without materializing the doubled tensor.
    w1 = leaves[pre + "gate_w1"]
    pre_act = guided @ w1[:t] + visual @ w1[t:]
    hidden = (pre_act + leaves[pre + "gate_b1"]).tanh()
    logits = hidden @ leaves[pre + "gate_w2"] + leaves[pre + "gate_b2"]
    if cfg.gate_mode == "sigmoid":
        gates = logits.sigmoid()
    else:
        gates = logits.softmax_rows()
    g1 = gates[..., 0:1]
    g2 = gates[..., 1:2]
    fused = guided * g1 + visual * g2
    return fused, gates


def interaction_tokens(fused: Tensor, values: Tensor, x: Tensor,
                       leaves: dict[str, Tensor], cfg: ModelConfig,
                       layer: int) -> Tensor:
    """Fused attention modulates the values; project, add residual, and run
    the block feed-forward (pre-norm)."""
    pre = f"l{layer}."
    out = _merge_heads(fused @ values, cfg)
    x = x + (out @ leaves[pre + "wo"] + leaves[pre + "wo_b"])
    h2 = x.layer_norm(leaves[pre + "ln2_s"], leaves[pre + "ln2_b"])
    ffn = (h2 @ leaves[pre + "ffn_w1"] + leaves[pre + "ffn_b1"]).gelu()
    ffn = ffn @ leaves[pre + "ffn_w2"] + leaves[pre + "ffn_b2"]
    return x + ffn


def forward(images: np.ndarray, leaves: dict[str, Tensor], cfg: ModelConfig,
            *,
            interaction: bool = True,
            gate_net: bool = True,
            gate_override: tuple[float, float] | None = None,
            ) -> ForwardResult:
    """Full pass. ``interaction=False`` gives the plain single-pathway
    transformer (the fused tensor is the visual one, bitwise). With the
    gate net off, gates sit at the fixed (0.5, 0.5) mix."""
    x = patch_embed(images, leaves, cfg)
    trace: list[LayerTrace] = []
    for i in range(cfg.layers):
        h = x.layer_norm(leaves[f"l{i}.ln1_s"], leaves[f"l{i}.ln1_b"])
        visual, guided, values = dual_attention(h, leaves, cfg, i,
                                                with_guided=interaction)
        if not interaction:
            fused = visual
            b, hh, t, _ = visual.shape
            gates = np.broadcast_to(
                np.asarray([0.0, 1.0], dtype=visual.dtype), (b, hh, t, 2))
        elif gate_override is not None:
            fused, gates = gated_fusion(guided, visual, leaves, cfg, i,
                                        gate_override=gate_override)
        elif not gate_net:
            fused, gates = gated_fusion(guided, visual, leaves, cfg, i,
                                        gate_override=(0.5, 0.5))
        else:
            fused, gates = gated_fusion(guided, visual, leaves, cfg, i)
        x = interaction_tokens(fused, values, x, leaves, cfg, i)
        trace.append(LayerTrace(
            visual=visual.data,
            guided=None if guided is None else guided.data,
            fused=fused.data,
            gates=gates.data if isinstance(gates, Tensor) else gates,
            guided_t=guided,
            visual_t=visual,
        ))
    h = x.layer_norm(leaves["head_ln_s"], leaves["head_ln_b"])
    cls_final = h[:, 0, :]
    logits = cls_final @ leaves["head_w"] + leaves["head_b"]
    return ForwardResult(logits=logits, trace=trace)


def predict_logits(images: np.ndarray, params: dict[str, np.ndarray],
                   cfg: ModelConfig, batch: int = 64, **mode) -> np.ndarray:
    """Gradient-free forward over a dataset, batched."""
    leaves = as_leaves(params)
    outs = []
    for lo in range(0, len(images), batch):
        res = forward(images[lo:lo + batch], leaves, cfg, **mode)
        outs.append(res.logits.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (little-endian): magic "IVIT", u32 version, u32 config-block byte
# length, config block (key=value lines, utf-8), u32 tensor count, then per
# tensor: u32 name length, name bytes, u32 rank, u32 dims..., f32 values.

_CONFIG_KEYS = ("image_size", "patch_size", "embed_dim", "heads", "layers",
                "classes", "gate_mode", "gcn_hidden", "channels")


def _config_block(cfg: ModelConfig) -> bytes:
    lines = [f"{k}={getattr(cfg, k)}" for k in _CONFIG_KEYS]
    return "\n".join(lines).encode("utf-8")


def _parse_config_block(raw: bytes) -> ModelConfig:
    fields: dict[str, object] = {}
    for line in raw.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        if key not in _CONFIG_KEYS:
            raise CheckpointFormatError(f"unknown config key {key!r} in checkpoint")
        fields[key] = value if key == "gate_mode" else int(value)
    missing = set(_CONFIG_KEYS) - set(fields)
    if missing:
        raise CheckpointFormatError(f"checkpoint config missing keys {sorted(missing)}")
    return ModelConfig(**fields)  # type: ignore[arg-type]


def save_checkpoint(path: str | Path, cfg: ModelConfig,
                    params: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    cfg_block = _config_block(cfg)
    blob += struct.pack("<I", len(cfg_block))
    blob += cfg_block
    blob += struct.pack("<I", len(params))
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated at byte {off}")
        piece = raw[off:off + n]
        off += n
        return piece

    if take(4) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = _parse_config_block(take(cfg_len))
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
        if not np.all(np.isfinite(data)):
            raise CheckpointFormatError(f"{path}: non-finite values in {name!r}")
        params[name] = data
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return cfg, params
