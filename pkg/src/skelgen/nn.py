"""Toy-scale implicit shape auto-encoder on the autodiff engine.

Encoder: dual-branch point network that aggregates surface features onto
skeletal points (feature-space KNN grouping + max pooling) and
standardizes the result with a learnable layer norm. Decoder: positional
embedding of query coordinates plus attention-based fusion with the
latent set, predicting one signed distance per query. The latent matrix
keeps the raw skeleton position+radius in its first four columns at every
stage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from skelgen.autodiff import Tensor, layer_norm, linear, mse
from skelgen.pointcloud import PointCloud
from skelgen.sdf import SdfVolume, sample_training_coords
from skelgen.skeleton import Skeleton, SkeletonizeConfig, skeletonize

CHECKPOINT_MAGIC = b"SKNN"


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class NetConfig:
    widths: tuple[int, ...] = (32, 64)  # per-level feature widths
    k_levels: tuple[int, ...] = (8, 8)  # feature-space KNN sizes per level
    latent_dim: int = 32  # d: feature channels in the latent set
    fusion_blocks: int = 2
    decoder_width: int = 64  # internal channel count of the fusion blocks
    pe_dim: int = 48  # sinusoidal embedding width, divisible by 6
    lambda_skeleton: float = 1.0

    def __post_init__(self):
        if len(self.widths) != len(self.k_levels):
            raise ValueError("widths and k_levels must have equal length")
        if self.pe_dim % 6 != 0:
            raise ValueError("pe_dim must be divisible by 6")

    @property
    def latent_channels(self) -> int:
        return 4 + self.latent_dim


@dataclass(frozen=True)
class LatentSet:
    """n_s x (4+d) latent matrix; columns 0-3 are skeleton position+radius."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[1] < 5:
            raise ValueError("latent matrix must be n_s x (4+d) with d >= 1")

    @property
    def n_s(self) -> int:
        return self.matrix.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[1] - 4

    def skeleton(self) -> Skeleton:
        return Skeleton(points=self.matrix[:, :3], radii=self.matrix[:, 3])


# ---------------------------------------------------------------------------
# Building blocks


def positional_embed(coords: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal features: per axis, d/6 (sin, cos) pairs at 2^j * pi."""
    if d % 6 != 0:
        raise ValueError("embedding width must be divisible by 6")
    coords = np.asarray(coords, dtype=np.float64)
    n_freq = d // 6
    freqs = np.pi * (2.0 ** np.arange(n_freq))
    parts = []
    for axis in range(3):
        phase = coords[:, axis : axis + 1] * freqs[None, :]  # (m, n_freq)
        pairs = np.stack([np.sin(phase), np.cos(phase)], axis=2)  # (m, n_freq, 2)
        parts.append(pairs.reshape(coords.shape[0], 2 * n_freq))
    return np.concatenate(parts, axis=1)


def pointnet_layer(features: Tensor, w: Tensor, b: Tensor, ln_gamma: Tensor, ln_beta: Tensor) -> Tensor:
    """Shared per-point MLP: linear -> layer norm -> GELU."""
    return layer_norm(linear(features, w, b), ln_gamma, ln_beta).gelu()


def feature_knn(queries: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest key rows per query row (Euclidean, ties by
    lowest index); selection only, not differentiated through."""
    if k > keys.shape[0]:
        raise ValueError(f"k={k} exceeds population {keys.shape[0]}")
    d2 = np.sum((queries[:, None, :] - keys[None, :, :]) ** 2, axis=2)
    tiebreak = np.arange(keys.shape[0])[None, :].repeat(queries.shape[0], axis=0)
    return np.lexsort((tiebreak, d2), axis=1)[:, :k]


def query_group_maxpool(skel_feats: Tensor, surf_feats: Tensor, k: int) -> Tensor:
    """Group k feature-space neighbors per skeleton row and max-pool them."""
    idx = feature_knn(skel_feats.data, surf_feats.data, k)
    n_s = idx.shape[0]
    d = surf_feats.data.shape[1]
    grouped = surf_feats.gather_rows(idx.ravel()).reshape(n_s, k, d)
    return grouped.max(axis=1)


def standardize(feats: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return layer_norm(feats, gamma, beta)


def destandardize(latent: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Learnable scale/shift on the feature block; skeleton columns pass
    through untouched."""
    skel = latent[:, :4]
    feats = latent[:, 4:]
    return Tensor.concat([skel, feats * gamma + beta], axis=1)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention."""
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    return (q @ k.T * scale).softmax(axis=-1) @ v


def fusion_block(f_q: Tensor, f_z: Tensor, params: dict, prefix: str) -> Tensor:
    """One decoder fusion step: self-attention over the latent set, an MLP on
    the coordinate features, then cross-attention from coordinates into the
    latent. Layer norm is applied to each attention branch before it joins
    the residual stream, so raw feature magnitudes carry through to the
    output head."""
    p = lambda name: params[f"{prefix}.{name}"]
    sa = attention(f_z @ p("sa.wq"), f_z @ p("sa.wk"), f_z @ p("sa.wv"))
    f_z = f_z + layer_norm(sa, p("sa.ln_g"), p("sa.ln_b"))
    h = f_q + linear(linear(f_q, p("mlp.w1"), p("mlp.b1")).gelu(), p("mlp.w2"), p("mlp.b2"))
    ca = attention(h @ p("ca.wq"), f_z @ p("ca.wk"), f_z @ p("ca.wv"))
    return h + layer_norm(ca, p("ca.ln_g"), p("ca.ln_b"))


# ---------------------------------------------------------------------------
# Parameter initialization


def _init_linear(rng, params, name, fan_in, fan_out):
    params[f"{name}.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _init_layernorm(params, name, dim):
    params[f"{name}_g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}_b"] = Tensor(np.zeros(dim), requires_grad=True)


def init_encoder_params(cfg: NetConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    w0 = cfg.widths[0]
    _init_linear(rng, params, "enc.surf_in", 3, w0)
    _init_linear(rng, params, "enc.skel_in", 4, w0)
    prev = w0
    for level, width in enumerate(cfg.widths):
        _init_linear(rng, params, f"enc.level{level}", prev, width)
        _init_layernorm(params, f"enc.level{level}.ln", width)
        prev = width
    _init_linear(rng, params, "enc.proj", prev, cfg.latent_dim)
    _init_layernorm(params, "enc.std", cfg.latent_dim)
    return params


def init_decoder_params(cfg: NetConfig, seed: int = 1) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    d = cfg.latent_dim
    w = cfg.decoder_width
    params["dec.destd_g"] = Tensor(np.ones(d), requires_grad=True)
    params["dec.destd_b"] = Tensor(np.zeros(d), requires_grad=True)
    _init_linear(rng, params, "dec.latent_in", 4 + d, w)
    _init_linear(rng, params, "dec.coord_in", cfg.pe_dim, w)
    for m in range(cfg.fusion_blocks):
        for attn in ("sa", "ca"):
            for mat in ("wq", "wk"):
                params[f"dec.block{m}.{attn}.{mat}"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(w), (w, w)), requires_grad=True
                )
            # Value projection starts at zero and the branch norm gain small,
            # so each attention branch begins as a near no-op; this keeps
            # early training stable at the high learning rates the toy
            # profile needs.
            params[f"dec.block{m}.{attn}.wv"] = Tensor(np.zeros((w, w)), requires_grad=True)
            _init_layernorm(params, f"dec.block{m}.{attn}.ln", w)
            params[f"dec.block{m}.{attn}.ln_g"].data *= 0.05
        for part in ("1", "2"):
            params[f"dec.block{m}.mlp.w{part}"] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(w), (w, w)), requires_grad=True
            )
            params[f"dec.block{m}.mlp.b{part}"] = Tensor(np.zeros(w), requires_grad=True)
    _init_linear(rng, params, "dec.out", w, 1)
    return params


# ---------------------------------------------------------------------------
# Encoder / decoder / loss


def encode(pc: PointCloud, skel: Skeleton, params: dict, cfg: NetConfig) -> Tensor:
    """Shape latent: raw skeleton block concatenated with standardized
    aggregated surface features; returns an n_s x (4+d) tensor."""
    x = Tensor(pc.points)
    xs = Tensor(np.column_stack([skel.points, skel.radii]))
    f = linear(x, params["enc.surf_in.w"], params["enc.surf_in.b"]).gelu()
    fs = linear(xs, params["enc.skel_in.w"], params["enc.skel_in.b"]).gelu()
    for level, k in enumerate(cfg.k_levels):
        w = params[f"enc.level{level}.w"]
        b = params[f"enc.level{level}.b"]
        g = params[f"enc.level{level}.ln_g"]
        bb = params[f"enc.level{level}.ln_b"]
        f = pointnet_layer(f, w, b, g, bb)
        fs_query = pointnet_layer(fs, w, b, g, bb)
        fs = query_group_maxpool(fs_query, f, k)
    feats = linear(fs, params["enc.proj.w"], params["enc.proj.b"])
    std = standardize(feats, params["enc.std_g"], params["enc.std_b"])
    return Tensor.concat([xs, std], axis=1)


def decode(latent, coords: np.ndarray, params: dict, cfg: NetConfig) -> Tensor:
    """Predict one signed distance per query coordinate."""
    if not isinstance(latent, Tensor):
        latent = Tensor(np.asarray(latent, dtype=np.float64))
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    z = destandardize(latent, params["dec.destd_g"], params["dec.destd_b"])
    f_z = linear(z, params["dec.latent_in.w"], params["dec.latent_in.b"])
    pe = Tensor(positional_embed(coords, cfg.pe_dim))
    f_q = linear(pe, params["dec.coord_in.w"], params["dec.coord_in.b"]).gelu()
    for m in range(cfg.fusion_blocks):
        f_q = fusion_block(f_q, f_z, params, f"dec.block{m}")
    out = linear(f_q, params["dec.out.w"], params["dec.out.b"])
    return out.reshape(coords.shape[0])


def composite_loss(
    pred: Tensor,
    gt: np.ndarray,
    skel: Skeleton,
    latent: Tensor,
    decoder_params: dict,
    cfg: NetConfig,
    lam: float = 1.0,
) -> Tensor:
    """MSE against ground-truth SDF plus the skeleton-radius constraint: the
    decoder evaluated at skeletal positions must predict +radius."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.data.shape[0] != gt.shape[0]:
        raise ValueError("prediction/target length mismatch")
    data_term = mse(pred, gt)
    if lam == 0.0:
        return data_term
    at_skel = decode(latent, skel.points, decoder_params, cfg)
    return data_term + lam * mse(at_skel, skel.radii)


# ---------------------------------------------------------------------------
# Toy training


class Adam:
    """Deterministic full-batch Adam."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * p.grad
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * p.grad ** 2
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainResult:
    losses: list[float]
    encoder: dict[str, Tensor]
    decoder: dict[str, Tensor]
    skeleton: Skeleton
    config: NetConfig


def train_toy(
    vol: SdfVolume,
    pc: PointCloud,
    cfg: NetConfig = NetConfig(),
    n_s: int = 16,
    m: int = 512,
    steps: int = 300,
    lr: float = 5e-2,
    seed: int = 0,
    trunc: float = 0.1,
    inside_frac: float = 0.9,
    optimizer: str = "adam",
    lam: float | None = None,
    warmup: int = 20,
) -> TrainResult:
    """Full-batch training of encoder+decoder on one shape.

    Each step takes one gradient step on a fresh batch of m voxel-center
    samples from a seed-derived stream, so over 300 steps the whole
    truncation band is covered. The returned loss trace is evaluated on a
    fixed probe batch before each update, making it a consistent progress
    measure (and exactly constant at lr = 0). Deterministic per seed;
    raises DivergenceError on a non-finite loss.
    """
    if lam is None:
        lam = cfg.lambda_skeleton
    skel_cfg = SkeletonizeConfig(n_s=n_s, hierarchical=4 * n_s <= len(pc))
    skel = skeletonize(pc, skel_cfg)
    probe = sample_training_coords(vol, m, trunc=trunc, inside_frac=inside_frac, seed=seed)
    enc = init_encoder_params(cfg, seed=seed)
    dec = init_decoder_params(cfg, seed=seed + 1)
    params = {**enc, **dec}
    opt = {"adam": Adam, "sgd": Sgd}[optimizer](params, lr)

    losses: list[float] = []
    for step in range(steps):
        if warmup:
            opt.lr = lr * min(1.0, (step + 1) / warmup)
        batch = sample_training_coords(vol, m, trunc=trunc, inside_frac=inside_frac, seed=seed * 100003 + step)
        opt.zero_grad()
        latent = encode(pc, skel, enc, cfg)
        probe_pred = decode(latent, probe.coords, dec, cfg)
        probe_loss = float(composite_loss(probe_pred, probe.values, skel, latent, dec, cfg, lam=lam).data)
        pred = decode(latent, batch.coords, dec, cfg)
        loss = composite_loss(pred, batch.values, skel, latent, dec, cfg, lam=lam)
        if not (np.isfinite(probe_loss) and np.isfinite(loss.data)):
            raise DivergenceError(f"loss diverged at step {step}")
        losses.append(probe_loss)
        loss.backward()
        opt.step()
    return TrainResult(losses=losses, encoder=enc, decoder=dec, skeleton=skel, config=cfg)


def save_net_config(path, cfg: NetConfig) -> None:
    with open(path, "w") as fh:
        fh.write(f"widths={','.join(str(w) for w in cfg.widths)}\n")
        fh.write(f"k_levels={','.join(str(k) for k in cfg.k_levels)}\n")
        fh.write(f"latent_dim={cfg.latent_dim}\n")
        fh.write(f"fusion_blocks={cfg.fusion_blocks}\n")
        fh.write(f"decoder_width={cfg.decoder_width}\n")
        fh.write(f"pe_dim={cfg.pe_dim}\n")
        fh.write(f"lambda_skeleton={cfg.lambda_skeleton:.17g}\n")


def load_net_config(path) -> NetConfig:
    values: dict = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return NetConfig(
        widths=tuple(int(w) for w in values["widths"].split(",")),
        k_levels=tuple(int(k) for k in values["k_levels"].split(",")),
        latent_dim=int(values["latent_dim"]),
        fusion_blocks=int(values["fusion_blocks"]),
        decoder_width=int(values["decoder_width"]),
        pe_dim=int(values["pe_dim"]),
        lambda_skeleton=float(values["lambda_skeleton"]),
    )


# ---------------------------------------------------------------------------
# Checkpoint format


def save_params(path, params: dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", 1))
        for name in sorted(params):
            data = params[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())


def load_params(path) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            (name_len,) = struct.unpack("<H", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return params
