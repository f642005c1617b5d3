"""Masked skeleton autoencoder: patch embedding, tuple attention blocks, heads.

Token tensors are kept 4-D as (batch, frames, joints, width) between blocks.
For attention, consecutive frames are grouped into non-overlapping tuples of
``tuple_len`` frames and every tuple attends over all of its
``tuple_len * joints`` tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .masking import MaskedBatch
from .tensor import Tensor

INIT_STD = 0.02
ACTIVATIONS = {"gelu": tn.gelu, "relu": tn.relu}


@dataclass(frozen=True)
class BlockConfig:
    d_in: int
    d_out: int
    d_qkv: int
    n_heads: int = 4

    def __post_init__(self):
        if min(self.d_in, self.d_out, self.d_qkv, self.n_heads) < 1:
            raise ValueError(f"block dimensions must be positive: {self}")
        if self.d_qkv % self.n_heads:
            raise ValueError(f"QKV width {self.d_qkv} is not divisible by {self.n_heads} heads")


@dataclass(frozen=True)
class ModelConfig:
    """Layer-by-layer widths of encoder and decoder.

    ``embed_width`` is the output width of the encoder input layer (the 1x1
    convolution). ``embed_dim`` is the nominal name-giving width.
    """

    name: str
    embed_dim: int
    embed_width: int
    encoder_blocks: tuple[BlockConfig, ...]
    decoder_blocks: tuple[BlockConfig, ...]
    input_dim: int = 3
    tuple_len: int = 2
    max_T: int = 20
    max_J: int = 25
    n_heads: int = 4
    mlp_ratio: int = 4
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "encoder_blocks", tuple(self.encoder_blocks))
        object.__setattr__(self, "decoder_blocks", tuple(self.decoder_blocks))
        if not self.encoder_blocks or not self.decoder_blocks:
            raise ValueError("encoder and decoder need at least one block each")
        if self.encoder_blocks[0].d_in != self.embed_width:
            raise ValueError(
                f"input layer width {self.embed_width} != first encoder block d_in {self.encoder_blocks[0].d_in}"
            )
        for part in (self.encoder_blocks, self.decoder_blocks):
            for a, b in zip(part, part[1:]):
                if a.d_out != b.d_in:
                    raise ValueError(f"blocks do not chain: {a} -> {b}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.tuple_len < 1:
            raise ValueError("tuple_len must be >= 1")

    @property
    def encoder_out(self) -> int:
        return self.encoder_blocks[-1].d_out

    @property
    def decoder_in(self) -> int:
        return self.decoder_blocks[0].d_in

    @property
    def decoder_out(self) -> int:
        return self.decoder_blocks[-1].d_out

    def layer_table(self) -> list[tuple[str, str, int, int, int | None]]:
        """Rows of (part, layer name, d_in, d_out, qkv) in table order."""
        rows = [("encoder", "input layer", self.input_dim, self.embed_width, None)]
        rows += [("encoder", f"Block{i + 1}", b.d_in, b.d_out, b.d_qkv) for i, b in enumerate(self.encoder_blocks)]
        rows += [("decoder", f"Block{i + 1}", b.d_in, b.d_out, b.d_qkv) for i, b in enumerate(self.decoder_blocks)]
        rows.append(("decoder", "output layer", self.decoder_out, self.input_dim, None))
        return rows

    def scaled(self, divisor: int, n_heads: int | None = None) -> "ModelConfig":
        """Same topology with every width divided by ``divisor`` (desk-scale sweeps)."""
        heads = n_heads or self.n_heads

        def shrink(v: int) -> int:
            if v % divisor:
                raise ValueError(f"width {v} is not divisible by {divisor}")
            return v // divisor

        def blocks(bs):
            return tuple(BlockConfig(shrink(b.d_in), shrink(b.d_out), shrink(b.d_qkv), heads) for b in bs)

        return replace(self, name=f"{self.name}/{divisor}", embed_dim=shrink(self.embed_dim),
                       embed_width=shrink(self.embed_width), encoder_blocks=blocks(self.encoder_blocks),
                       decoder_blocks=blocks(self.decoder_blocks), n_heads=heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["encoder_blocks"] = tuple(BlockConfig(**b) for b in obj["encoder_blocks"])
        obj["decoder_blocks"] = tuple(BlockConfig(**b) for b in obj["decoder_blocks"])
        return cls(**obj)


# (d_in, d_out, qkv) per block, copied from the detailed architecture tables.
_ENC_256 = ((64, 64, 16), (64, 64, 16), (64, 128, 32), (128, 128, 32),
            (128, 256, 64), (256, 256, 64), (256, 256, 64), (256, 256, 64))
PRESET_TABLES: dict[str, dict] = {
    "dim256-depth9": {
        "embed_dim": 256, "embed_width": 64, "encoder": _ENC_256,
        "decoder": ((256, 256, 64), (256, 256, 64), (256, 256, 64), (256, 128, 64),
                    (128, 128, 32), (128, 64, 32), (64, 64, 16), (64, 64, 16)),
    },
    "dim512-depth9": {
        "embed_dim": 512, "embed_width": 64,
        "encoder": ((64, 64, 16), (64, 128, 32), (128, 128, 32), (128, 256, 64),
                    (256, 256, 64), (256, 512, 128), (512, 512, 128), (512, 512, 128)),
        "decoder": ((512, 512, 128), (512, 512, 128), (512, 256, 64), (256, 256, 64),
                    (256, 128, 32), (128, 128, 32), (128, 64, 16), (64, 64, 16)),
    },
    "dim128-depth9": {
        "embed_dim": 128, "embed_width": 32,
        "encoder": ((32, 32, 8), (32, 32, 8), (32, 64, 16), (64, 64, 16),
                    (64, 128, 32), (128, 128, 32), (128, 128, 32), (128, 128, 32)),
        "decoder": ((128, 128, 32), (128, 128, 32), (128, 128, 32), (128, 64, 32),
                    (64, 64, 16), (64, 32, 16), (32, 32, 8), (32, 32, 8)),
    },
    "dim256-depth5": {
        "embed_dim": 256, "embed_width": 64, "encoder": _ENC_256,
        "decoder": ((256, 128, 64), (128, 128, 32), (128, 64, 32), (64, 64, 16)),
    },
    "dim256-depth7": {
        "embed_dim": 256, "embed_width": 64, "encoder": _ENC_256,
        "decoder": ((256, 256, 64), (256, 256, 64), (256, 128, 64), (128, 128, 32),
                    (128, 64, 32), (64, 64, 16)),
    },
    "dim256-depth11": {
        "embed_dim": 256, "embed_width": 64, "encoder": _ENC_256,
        "decoder": ((256, 256, 64), (256, 256, 64), (256, 256, 64), (256, 256, 64),
                    (256, 128, 64), (128, 128, 32), (128, 128, 32), (128, 64, 32),
                    (64, 64, 16), (64, 64, 16)),
    },
    # desk-scale configurations, not from the tables
    "tiny": {
        "embed_dim": 32, "embed_width": 16,
        "encoder": ((16, 16, 16), (16, 32, 16)),
        "decoder": ((32, 32, 16), (32, 16, 16)),
    },
    "micro": {
        "embed_dim": 16, "embed_width": 8,
        "encoder": ((8, 16, 8),),
        "decoder": ((16, 8, 8),),
    },
}
PAPER_PRESETS = ("dim256-depth9", "dim512-depth9", "dim128-depth9",
                 "dim256-depth5", "dim256-depth7", "dim256-depth11")
EMBED_DIM_PRESETS = {128: "dim128-depth9", 256: "dim256-depth9", 512: "dim512-depth9"}
DECODER_DEPTH_PRESETS = {11: "dim256-depth11", 9: "dim256-depth9", 7: "dim256-depth7", 5: "dim256-depth5"}


def preset(name: str, **overrides) -> ModelConfig:
    """Build a named configuration; keyword overrides replace scalar fields."""
    if name not in PRESET_TABLES:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESET_TABLES)}")
    t = PRESET_TABLES[name]
    heads = overrides.pop("n_heads", 2 if name == "micro" else 4)
    return ModelConfig(
        name=name,
        embed_dim=t["embed_dim"],
        embed_width=t["embed_width"],
        encoder_blocks=tuple(BlockConfig(*b, n_heads=heads) for b in t["encoder"]),
        decoder_blocks=tuple(BlockConfig(*b, n_heads=heads) for b in t["decoder"]),
        n_heads=heads,
        **overrides,
    )


def positional_encoding(frame_idx, joint_idx, max_J: int, d_model: int) -> np.ndarray:
    """Sine-cosine code of the flat position ``frame * max_J + joint``.

    Works elementwise over index arrays and appends a trailing axis of width
    ``d_model``: even channels hold sines, odd channels cosines.
    """
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    p = np.asarray(frame_idx, dtype=np.float64) * max_J + np.asarray(joint_idx, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d_model, 2) / d_model))
    ang = p[..., None] * inv_freq
    out = np.empty(p.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


class Module:
    """Parameter container; parameters are discovered from attributes.

    Tensors with ``requires_grad`` are parameters. Other tensor attributes
    are buffers: saved and loaded with the state but never optimised.
    """

    def _named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value._named_tensors(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m._named_tensors(f"{prefix}{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._named_tensors(prefix) if t.requires_grad)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._named_tensors(prefix) if not t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self._named_tensors())
        problems = []
        for name, p in own.items():
            if name not in state:
                if strict:
                    problems.append(f"missing {name} {p.shape}")
                continue
            if tuple(state[name].shape) != p.shape:
                problems.append(f"{name}: expected {p.shape}, got {tuple(state[name].shape)}")
        if strict:
            problems += [f"unexpected {n}" for n in state if n not in own]
        if problems:
            raise ValueError("state does not match model: " + "; ".join(problems))
        for name, p in own.items():
            if name in state:
                p.data = np.array(state[name], dtype=np.float64)


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    x = rng.normal(scale=std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(scale=std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, (d_in, d_out))


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        self.weight = _param(np.zeros((d_in, d_out)) if zero else _xavier_uniform(rng, d_in, d_out))
        self.bias = _param(np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise tn.ShapeError(f"linear layer expects width {self.d_in}, got input {x.shape}")
        return tn.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gain, self.bias, self.eps)


@dataclass
class TokenGrid:
    """Embedded tokens (batch, frames, joints, width) with their original indices."""

    tokens: Tensor
    frame_ids: np.ndarray  # (batch, frames, joints)
    joint_ids: np.ndarray  # (batch, frames, joints)

    @property
    def count(self) -> int:
        return self.tokens.shape[1] * self.tokens.shape[2]


def patch_embed(layer: Linear, visible: np.ndarray, frame_idx: np.ndarray, joint_idx: np.ndarray) -> TokenGrid:
    """1x1 convolution over the joint grid, i.e. one shared linear map per joint."""
    x = Tensor(visible)
    tokens = layer(x)
    fids = np.broadcast_to(np.asarray(frame_idx)[..., None], joint_idx.shape)
    return TokenGrid(tokens, fids, np.asarray(joint_idx))


def divide_tuples(x: Tensor, tuple_len: int) -> tuple[Tensor, int]:
    """Group (B, T, J, d) into (B, n_tuples, tuple_len * J, d).

    When ``tuple_len`` does not divide T the last frame is repeated; the
    returned frame count tells :func:`merge_tuples` how much to drop.
    """
    B, T, J, d = x.shape
    if tuple_len > T:
        raise ValueError(f"tuple_len {tuple_len} exceeds the {T} available frames")
    pad = (-T) % tuple_len
    if pad:
        x = tn.take(x, np.r_[np.arange(T), np.full(pad, T - 1)], axis=1)
    n = (T + pad) // tuple_len
    return x.reshape(B, n, tuple_len * J, d), T


def merge_tuples(x: Tensor, n_frames: int, n_joints: int) -> Tensor:
    B, n, N, d = x.shape
    x = x.reshape(B, N // n_joints * n, n_joints, d)
    if x.shape[1] != n_frames:
        x = tn.take(x, np.arange(n_frames), axis=1)
    return x


class STTABlock(Module):
    """Tuple-scoped multi-head self-attention followed by a feedforward.

    Pre-norm residual layout; when ``d_in != d_out`` the attention residual
    goes through a linear projection.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, mlp_ratio: int = 4, activation: str = "gelu"):
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.d_in)
        self.query = Linear(cfg.d_in, cfg.d_qkv, rng)
        self.key = Linear(cfg.d_in, cfg.d_qkv, rng)
        self.value = Linear(cfg.d_in, cfg.d_qkv, rng)
        self.proj = Linear(cfg.d_qkv, cfg.d_out, rng)
        self.shortcut = Linear(cfg.d_in, cfg.d_out, rng) if cfg.d_in != cfg.d_out else None
        self.norm2 = LayerNorm(cfg.d_out)
        self.fc1 = Linear(cfg.d_out, mlp_ratio * cfg.d_out, rng)
        self.fc2 = Linear(mlp_ratio * cfg.d_out, cfg.d_out, rng)
        self.act = ACTIVATIONS[activation]

    def attention(self, x: Tensor) -> Tensor:
        B, n, N, _ = x.shape
        H = self.cfg.n_heads
        dh = self.cfg.d_qkv // H

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, n, N, H, dh).transpose(0, 1, 3, 2, 4)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = (q @ k.transpose(0, 1, 2, 4, 3)) * (1.0 / math.sqrt(dh))
        weights = tn.softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 1, 3, 2, 4).reshape(B, n, N, self.cfg.d_qkv)
        return self.proj(ctx)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.d_in:
            raise tn.ShapeError(f"block expects token width {self.cfg.d_in}, got {x.shape}")
        res = x if self.shortcut is None else self.shortcut(x)
        y = res + self.attention(self.norm1(x))
        return y + self.fc2(self.act(self.fc1(self.norm2(y))))


def stta_block(x: Tensor, block: STTABlock) -> Tensor:
    return block(x)


def _blocks(cfgs: Sequence[BlockConfig], rng, cfg: ModelConfig) -> list[STTABlock]:
    return [STTABlock(b, rng, cfg.mlp_ratio, cfg.activation) for b in cfgs]


def input_stats(frames: np.ndarray, max_J: int) -> tuple[np.ndarray, float]:
    """Per-joint mean pose and one global spread of a (N, T, J, D) stack.

    Rows beyond ``J`` are zero so the result fits any ``max_J >= J``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    N, T, J, D = frames.shape
    if J > max_J:
        raise ValueError(f"{J} joints exceed max_J={max_J}")
    mean = np.zeros((max_J, D))
    mean[:J] = frames.mean(axis=(0, 1))
    spread = float((frames - mean[:J]).std())
    return mean, spread if spread > 0 else 1.0


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        # identity until set_input_stats; stored with the weights
        self.input_mean = Tensor(np.zeros((cfg.max_J, cfg.input_dim)))
        self.input_scale = Tensor(np.ones(1))
        self.input_layer = Linear(cfg.input_dim, cfg.embed_width, rng)
        self.blocks = _blocks(cfg.encoder_blocks, rng, cfg)
        self.norm = LayerNorm(cfg.encoder_out)

    def set_input_stats(self, mean: np.ndarray, scale: float) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        if mean.shape != self.input_mean.shape:
            raise tn.ShapeError(f"input mean must be {self.input_mean.shape}, got {mean.shape}")
        if not scale > 0:
            raise ValueError(f"input scale must be positive, got {scale}")
        self.input_mean = Tensor(mean)
        self.input_scale = Tensor(np.array([float(scale)]))

    def standardize(self, frames: np.ndarray, joint_idx: np.ndarray) -> np.ndarray:
        return (frames - self.input_mean.data[joint_idx]) / self.input_scale.data[0]

    def destandardize(self, x: Tensor, n_joints: int) -> Tensor:
        return x * float(self.input_scale.data[0]) + Tensor(self.input_mean.data[:n_joints])

    def __call__(self, visible: np.ndarray, frame_idx: np.ndarray, joint_idx: np.ndarray) -> Tensor:
        """Embed (B, T', J', D) visible joints into (B, T', J', d_out) features."""
        visible = np.asarray(visible, dtype=np.float64)
        if visible.ndim != 4 or visible.shape[-1] != self.cfg.input_dim:
            raise tn.ShapeError(f"encoder expects (B, T', J', {self.cfg.input_dim}), got {visible.shape}")
        visible = self.standardize(visible, np.asarray(joint_idx))
        grid = patch_embed(self.input_layer, visible, frame_idx, joint_idx)
        pe = positional_encoding(grid.frame_ids, grid.joint_ids, self.cfg.max_J, self.cfg.embed_width)
        x = grid.tokens + Tensor(pe)
        _, T, J, _ = x.shape
        x, n_frames = divide_tuples(x, min(self.cfg.tuple_len, T))
        for block in self.blocks:
            x = block(x)
        return self.norm(merge_tuples(x, n_frames, J))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.bridge = Linear(cfg.encoder_out, cfg.decoder_in, rng) if cfg.encoder_out != cfg.decoder_in else None
        self.mask_token = _param(_trunc_normal(rng, (cfg.decoder_in,)))
        self.blocks = _blocks(cfg.decoder_blocks, rng, cfg)
        self.norm = LayerNorm(cfg.decoder_out)
        self.output_layer = Linear(cfg.decoder_out, cfg.input_dim, rng)

    def fill_grid(self, latent: Tensor, positions: np.ndarray, T: int, J: int) -> Tensor:
        """Place visible latents on the full T x J grid; mask token elsewhere."""
        B, Tv, Jv, d = latent.shape
        positions = np.asarray(positions, dtype=np.int64).reshape(B, -1)
        if positions.shape[1] != Tv * Jv:
            raise ValueError(f"{positions.shape[1]} positions for {Tv * Jv} latent tokens")
        if positions.size and (positions.min() < 0 or positions.max() >= T * J):
            raise ValueError(f"token positions fall outside the {T} x {J} grid")
        n_vis = B * Tv * Jv
        flat = latent.reshape(n_vis, d)
        rows = tn.concatenate([flat, self.mask_token.reshape(1, d)], axis=0)
        index = np.full((B, T * J), n_vis, dtype=np.int64)
        index[np.arange(B)[:, None], positions] = np.arange(n_vis).reshape(B, -1)
        return tn.take(rows, index.reshape(-1), axis=0).reshape(B, T, J, d)

    def __call__(self, latent: Tensor, positions: np.ndarray, T: int, J: int) -> Tensor:
        if latent.shape[-1] != self.cfg.encoder_out:
            raise tn.ShapeError(f"decoder expects latent width {self.cfg.encoder_out}, got {latent.shape}")
        if self.bridge is not None:
            latent = self.bridge(latent)
        x = self.fill_grid(latent, positions, T, J)
        f, j = np.meshgrid(np.arange(T), np.arange(J), indexing="ij")
        x = x + Tensor(positional_encoding(f, j, self.cfg.max_J, self.cfg.decoder_in))
        x, n_frames = divide_tuples(x, min(self.cfg.tuple_len, T))
        for block in self.blocks:
            x = block(x)
        x = merge_tuples(x, n_frames, J)
        return self.output_layer(self.norm(x))


class SkeletonMAE(Module):
    """Encoder over visible joints plus a decoder that rebuilds the full sequence."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def encode(self, batch: MaskedBatch) -> Tensor:
        return self.encoder(batch.visible, batch.frame_idx, batch.joint_idx)

    def decode(self, latent: Tensor, batch: MaskedBatch) -> Tensor:
        """Full (B, T, J, D) reconstruction in the original coordinate units."""
        return self.encoder.destandardize(self.decoder(latent, batch.positions, batch.T, batch.J), batch.J)

    def __call__(self, batch: MaskedBatch) -> Tensor:
        return self.decode(self.encode(batch), batch)


class ActionClassifier(Module):
    """Encoder on the unmasked sequence, mean-pooled, then one linear layer."""

    def __init__(self, cfg: ModelConfig, n_classes: int, seed: int = 0, zero_head: bool = False):
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        rng = np.random.Generator(np.random.PCG64(seed))
        self.cfg = cfg
        self.n_classes = n_classes
        self.encoder = Encoder(cfg, rng)
        self.head = Linear(cfg.encoder_out, n_classes, rng, zero=zero_head)

    def features(self, frames: np.ndarray) -> Tensor:
        frames = np.asarray(frames, dtype=np.float64)
        B, T, J, _ = frames.shape
        fidx = np.broadcast_to(np.arange(T), (B, T))
        jidx = np.broadcast_to(np.arange(J), (B, T, J))
        return self.encoder(frames, fidx, jidx).mean(axis=(1, 2))

    def __call__(self, frames: np.ndarray) -> Tensor:
        return self.head(self.features(frames))

    def load_encoder(self, state: dict[str, np.ndarray]) -> None:
        """Copy ``encoder.*`` entries of a pretraining state into this model."""
        enc = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
        own = self.encoder.state_dict()
        expected = sorted((n, v.shape) for n, v in own.items())
        got = sorted((n, tuple(v.shape)) for n, v in enc.items())
        if expected != got:
            raise ValueError(f"encoder checkpoint mismatch:\n  expected {expected}\n  got {got}")
        self.encoder.load_state_dict(enc)


def classify(model: ActionClassifier, frames: np.ndarray) -> Tensor:
    return model(frames)


def _block_params(b: BlockConfig, mlp_ratio: int) -> int:
    hidden = mlp_ratio * b.d_out
    n = 2 * b.d_in                          # norm1
    n += 3 * (b.d_in * b.d_qkv + b.d_qkv)   # q, k, v
    n += b.d_qkv * b.d_out + b.d_out        # proj
    if b.d_in != b.d_out:
        n += b.d_in * b.d_out + b.d_out     # shortcut
    n += 2 * b.d_out                        # norm2
    n += b.d_out * hidden + hidden + hidden * b.d_out + b.d_out
    return n


def count_params(cfg: ModelConfig) -> int:
    """Learnable scalars of the pretraining model (encoder plus decoder)."""
    n = cfg.input_dim * cfg.embed_width + cfg.embed_width
    n += sum(_block_params(b, cfg.mlp_ratio) for b in cfg.encoder_blocks)
    n += 2 * cfg.encoder_out
    if cfg.encoder_out != cfg.decoder_in:
        n += cfg.encoder_out * cfg.decoder_in + cfg.decoder_in
    n += cfg.decoder_in
    n += sum(_block_params(b, cfg.mlp_ratio) for b in cfg.decoder_blocks)
    n += 2 * cfg.decoder_out
    n += cfg.decoder_out * cfg.input_dim + cfg.input_dim
    return n
