"""LAMAE: per-lead shared encoder, latent attention over the pooled lead set,
per-lead shared decoder, masked patch reconstruction.

Shapes use B records, L leads, T patches per lead, P samples per patch, d
encoder width and dd decoder width. The training path is batched with a
fixed number of visible patches per lead; :func:`forward_record` handles
arbitrary per-lead visibility for a single record.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tn
from .dataio import STANDARD_LEADS, EcgRecord
from .tensor import Tensor


class EmptyLatentSet(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_len: int = 25
    d_model: int = 64
    n_heads_enc: int = 4
    n_layers_enc: int = 4
    d_decoder: int = 32
    n_heads_dec: int = 4
    n_layers_dec: int = 2
    n_heads_la: int = 4
    n_layers_la: int = 2
    alpha_e: float = 0.75
    alpha_la: float = 0.25
    n_leads: int = 12
    lead_names: tuple = STANDARD_LEADS
    latent_attention_enabled: bool = True
    normalize_per_token: bool = False
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "lead_names", tuple(self.lead_names))
        for name in ("patch_len", "d_model", "n_heads_enc", "d_decoder", "n_heads_dec",
                     "n_heads_la", "n_leads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("n_layers_enc", "n_layers_dec", "n_layers_la"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.d_model % self.n_heads_enc or self.d_model % self.n_heads_la:
            raise ValueError("d_model must be divisible by n_heads_enc and n_heads_la")
        if self.d_decoder % self.n_heads_dec:
            raise ValueError("d_decoder must be divisible by n_heads_dec")
        if not 0.0 < self.alpha_e < 1.0:
            raise ValueError("alpha_e must lie in (0, 1)")
        if not 0.0 <= self.alpha_la < 1.0:
            raise ValueError("alpha_la must lie in [0, 1)")
        if len(self.lead_names) != self.n_leads or len(set(self.lead_names)) != self.n_leads:
            raise ValueError("lead_names must list n_leads unique names")

    def lead_ids(self, names) -> np.ndarray:
        try:
            return np.array([self.lead_names.index(n) for n in names], dtype=np.intp)
        except ValueError as exc:
            raise ValueError(f"record lead not known to the model: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def n_visible(T: int, alpha: float) -> int:
    return int(np.floor((1.0 - alpha) * T + 0.5))


@dataclass
class MaskSpec:
    T: int
    alpha: float
    visible: np.ndarray
    seed: object = None

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=np.intp)

    @property
    def masked(self) -> np.ndarray:
        keep = np.zeros(self.T, dtype=bool)
        keep[self.visible] = True
        return np.flatnonzero(~keep)

    def visible_flags(self) -> np.ndarray:
        flags = np.zeros(self.T, dtype=bool)
        flags[self.visible] = True
        return flags


def _draw_visible(rng, batch_shape, T, k) -> np.ndarray:
    keys = rng.random(tuple(batch_shape) + (T,))
    return np.sort(np.argsort(keys, axis=-1, kind="stable")[..., :k], axis=-1)


def sample_mask(T: int, alpha: float, seed) -> MaskSpec:
    """Uniform random visible subset of size round((1 - alpha) T)."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    k = n_visible(T, alpha)
    if T < 1 or k < 1:
        raise ValueError(f"mask ratio {alpha} leaves no visible token out of {T}")
    vis = _draw_visible(np.random.default_rng(seed), (), T, k)
    return MaskSpec(T, alpha, vis, seed)


def full_mask(T: int) -> MaskSpec:
    return MaskSpec(T, 0.0, np.arange(T))


@dataclass
class LatentSet:
    tokens: Tensor
    lead_id: np.ndarray
    patch_index: np.ndarray
    cls: Tensor = None

    def __post_init__(self):
        self.lead_id = np.asarray(self.lead_id, dtype=np.intp)
        self.patch_index = np.asarray(self.patch_index, dtype=np.intp)
        n = self.tokens.shape[0]
        if self.lead_id.shape != (n,) or self.patch_index.shape != (n,):
            raise ValueError("every token needs one lead id and one patch index")
        pairs = set(zip(self.lead_id.tolist(), self.patch_index.tolist()))
        if len(pairs) != n:
            raise ValueError("(lead_id, patch_index) tags must be unique")

    def __len__(self):
        return self.tokens.shape[0]

    def permuted(self, order) -> "LatentSet":
        order = np.asarray(order)
        return LatentSet(tn.take(self.tokens, order), self.lead_id[order], self.patch_index[order], self.cls)

    def select_lead(self, lead: int) -> "LatentSet":
        idx = np.flatnonzero(self.lead_id == lead)
        return LatentSet(tn.take(self.tokens, idx), self.lead_id[idx], self.patch_index[idx], self.cls)


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng, shape, std):
    x = rng.normal(0.0, std, shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _block_shapes(prefix, d, ratio):
    return {
        prefix + "ln1.g": ("ones", (d,)), prefix + "ln1.b": ("zeros", (d,)),
        prefix + "attn.qkv.w": ("normal", (d, 3 * d)), prefix + "attn.qkv.b": ("zeros", (3 * d,)),
        prefix + "attn.proj.w": ("normal", (d, d)), prefix + "attn.proj.b": ("zeros", (d,)),
        prefix + "ln2.g": ("ones", (d,)), prefix + "ln2.b": ("zeros", (d,)),
        prefix + "mlp.fc1.w": ("normal", (d, ratio * d)), prefix + "mlp.fc1.b": ("zeros", (ratio * d,)),
        prefix + "mlp.fc2.w": ("normal", (ratio * d, d)), prefix + "mlp.fc2.b": ("zeros", (d,)),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    d, dd, r = cfg.d_model, cfg.d_decoder, cfg.mlp_ratio
    spec = {
        "patch_embed.w": ("normal", (cfg.patch_len, d)),
        "patch_embed.b": ("zeros", (d,)),
        "lead_embed": ("normal", (cfg.n_leads, d)),
    }
    for i in range(cfg.n_layers_enc):
        spec.update(_block_shapes(f"enc.{i}.", d, r))
    spec["enc.norm.g"], spec["enc.norm.b"] = ("ones", (d,)), ("zeros", (d,))
    spec["la.cls"] = ("zeros", (d,))
    if cfg.latent_attention_enabled:
        for i in range(cfg.n_layers_la):
            spec.update(_block_shapes(f"la.{i}.", d, r))
    spec["dec.embed.w"] = ("normal", (d, dd))
    spec["dec.embed.b"] = ("zeros", (dd,))
    spec["dec.mask_token"] = ("zeros", (dd,))
    for i in range(cfg.n_layers_dec):
        spec.update(_block_shapes(f"dec.{i}.", dd, r))
    spec["dec.norm.g"], spec["dec.norm.b"] = ("ones", (dd,)), ("zeros", (dd,))
    spec["dec.head.w"] = ("normal", (dd, cfg.patch_len))
    spec["dec.head.b"] = ("zeros", (cfg.patch_len,))
    return spec


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameters; each tensor draws from its own (seed, name) stream."""
    params = {}
    for name, (kind, shape) in param_shapes(cfg).items():
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            data = _trunc_normal(rng, shape, cfg.init_std)
        params[name] = tn.parameter(data)
    return params


def count_params(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


def clone_params(params: dict) -> dict:
    return {k: tn.parameter(v.data.copy()) for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_table(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    div = np.exp(-np.log(10000.0) * (2 * np.arange((d + 1) // 2)) / d)
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return table


def _ln(p, prefix, x, eps):
    return tn.layer_norm(x, p[prefix + "g"], p[prefix + "b"], eps)


def _self_attention(p, prefix, x, n_heads):
    qkv = tn.linear(x, p[prefix + "qkv.w"], p[prefix + "qkv.b"])
    out = tn.multi_head_self_attention(qkv, n_heads)
    return tn.linear(out, p[prefix + "proj.w"], p[prefix + "proj.b"])


def transformer_block(p, prefix, x, n_heads, eps):
    """Pre-norm block: attention then GELU MLP, each with a residual."""
    x = x + _self_attention(p, prefix + "attn.", _ln(p, prefix + "ln1.", x, eps), n_heads)
    h = _ln(p, prefix + "ln2.", x, eps)
    h = tn.gelu(tn.linear(h, p[prefix + "mlp.fc1.w"], p[prefix + "mlp.fc1.b"]))
    return x + tn.linear(h, p[prefix + "mlp.fc2.w"], p[prefix + "mlp.fc2.b"])


def patchify(signal, patch_len: int) -> np.ndarray:
    """Non-overlapping windows; a trailing partial window is dropped."""
    signal = np.asarray(signal, dtype=np.float64)
    if patch_len <= 0 or patch_len > signal.shape[-1]:
        raise ValueError(f"patch_len {patch_len} invalid for signal length {signal.shape[-1]}")
    T = signal.shape[-1] // patch_len
    return signal[..., : T * patch_len].reshape(signal.shape[:-1] + (T, patch_len))


def record_patches(record: EcgRecord, cfg: ModelConfig) -> np.ndarray:
    return patchify(record.samples, cfg.patch_len)


# ---------------------------------------------------------------------------
# batched network stages


def _encode(p, cfg, patches, index):
    """patches (N, Tv, P), index (N, Tv) -> latents (N, Tv, d)."""
    N, Tv, _ = patches.shape
    T = int(index.max()) + 1 if index.size else 1
    pos = sinusoidal_table(T, cfg.d_model)[index]
    x = tn.linear(patches, p["patch_embed.w"], p["patch_embed.b"]) + pos
    for i in range(cfg.n_layers_enc):
        x = transformer_block(p, f"enc.{i}.", x, cfg.n_heads_enc, cfg.ln_eps)
    return _ln(p, "enc.norm.", x, cfg.ln_eps)


def _latent_attention(p, cfg, tokens, lead_ids):
    """tokens (B, K, d), lead_ids (B, K) -> (tokens_out (B, K, d), cls (B, d))."""
    B, K, d = tokens.shape
    x = tokens + tn.take(p["lead_embed"], lead_ids)
    cls = tn.broadcast_to(tn.reshape(p["la.cls"], (1, 1, d)), (B, 1, d))
    x = tn.concat([cls, x], axis=1)
    for i in range(cfg.n_layers_la):
        x = transformer_block(p, f"la.{i}.", x, cfg.n_heads_la, cfg.ln_eps)
    return x[:, 1:], x[:, 0]


def _decode(p, cfg, tokens, rows, cls, lead_ids, T):
    """Reconstruct every patch of every lead.

    tokens (B, K, d) are latent-attention outputs, ``rows`` (B, K) their flat
    position ``lead_slot * T + patch`` within the record, ``cls`` (B, d) the
    summary token and ``lead_ids`` (L,) the model lead index of each slot.
    Returns (B, L, T, P).
    """
    B, K, _ = tokens.shape
    L = len(lead_ids)
    dd = cfg.d_decoder
    grid_rows = (np.arange(B)[:, None] * (L * T) + rows).reshape(-1)
    z = tn.linear(tokens, p["dec.embed.w"], p["dec.embed.b"])
    grid = tn.scatter_rows(tn.reshape(z, (B * K, dd)), grid_rows, B * L * T)
    empty = np.ones((B * L * T, 1))
    empty[grid_rows] = 0.0
    x = grid + tn.mul(empty, p["dec.mask_token"])
    x = tn.reshape(x, (B, L, T, dd)) + sinusoidal_table(T, dd)
    lead_term = tn.take(tn.matmul(p["lead_embed"], p["dec.embed.w"]), lead_ids)
    x = x + tn.reshape(lead_term, (1, L, 1, dd))
    c = tn.linear(cls, p["dec.embed.w"], p["dec.embed.b"])
    c = tn.broadcast_to(tn.reshape(c, (B, 1, 1, dd)), (B, L, 1, dd))
    x = tn.reshape(tn.concat([c, x], axis=2), (B * L, T + 1, dd))
    for i in range(cfg.n_layers_dec):
        x = transformer_block(p, f"dec.{i}.", x, cfg.n_heads_dec, cfg.ln_eps)
    x = _ln(p, "dec.norm.", x, cfg.ln_eps)
    out = tn.linear(x, p["dec.head.w"], p["dec.head.b"])[:, 1:]
    return tn.reshape(out, (B, L, T, cfg.patch_len))


def _summary(p, cfg, pooled, lead_ids):
    """(tokens_out, cls) from pooled latents; pass-through for the baseline."""
    if cfg.latent_attention_enabled:
        return _latent_attention(p, cfg, pooled, lead_ids)
    B, _, d = pooled.shape
    return pooled, tn.broadcast_to(tn.reshape(p["la.cls"], (1, d)), (B, d))


# ---------------------------------------------------------------------------
# per-lead / per-record operations


def encode_lead(params, cfg: ModelConfig, patches, indices) -> Tensor:
    """Latents (T_vis, d) of one lead from its visible patches only."""
    patches = np.asarray(patches, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.intp)
    if patches.ndim != 2 or len(patches) != len(indices) or len(indices) < 1:
        raise ValueError("need one patch per index and at least one visible patch")
    return _encode(params, cfg, patches[None], indices[None])[0]


def latent_attention(params, cfg: ModelConfig, latent_set: LatentSet, la_mask: MaskSpec = None):
    """Joint self-attention over the surviving pooled tokens plus a CLS token.

    Returns the surviving tokens (tags preserved) and the final CLS state.
    """
    n = len(latent_set)
    if la_mask is None:
        la_mask = full_mask(n)
    if la_mask.T != n:
        raise ValueError(f"LA mask covers {la_mask.T} tokens, latent set has {n}")
    keep = la_mask.visible
    if len(keep) == 0:
        raise EmptyLatentSet("empty latent set")
    survivors = latent_set if len(keep) == n else LatentSet(
        tn.take(latent_set.tokens, keep), latent_set.lead_id[keep], latent_set.patch_index[keep])
    out, cls = _latent_attention(params, cfg, tn.reshape(survivors.tokens, (1, len(keep), cfg.d_model)),
                                 survivors.lead_id[None])
    return LatentSet(out[0], survivors.lead_id, survivors.patch_index, cls[0]), cls[0]


def decode_lead(params, cfg: ModelConfig, lead_tokens: LatentSet, lead: int, T: int, cls) -> Tensor:
    """Reconstruction (T, P) of one lead from its LA outputs and the CLS state.

    Positions without a token (masked by the encoder mask or dropped before
    latent attention) receive the learned mask token.
    """
    if np.any(lead_tokens.lead_id != lead):
        raise ValueError(f"token tagged with a lead other than {lead}")
    k = len(lead_tokens)
    tokens = tn.reshape(lead_tokens.tokens, (1, k, cfg.d_model))
    cls = tn.reshape(tn.as_tensor(cls), (1, cfg.d_model))
    out = _decode(params, cfg, tokens, lead_tokens.patch_index[None], cls, np.array([lead]), T)
    return out[0, 0]


def mae_loss(X, X_hat, masks, alpha_e: float, normalize_per_token: bool = False) -> Tensor:
    """Masked reconstruction objective of one record.

    ``(1 / alpha_e) (1 / |L|) sum_l sum_{t not visible} ||x_lt - x_hat_lt||^2``

    ``X`` and ``X_hat`` are (L, T, P); ``masks`` holds the encoder mask of each
    lead.
    """
    X = np.asarray(X, dtype=np.float64)
    L, T, P = X.shape
    w = _loss_weights(np.stack([m.visible_flags() for m in masks]), alpha_e, normalize_per_token, P)
    return tn.tensor_sum(tn.mul(tn.square(tn.sub(X_hat, X)), w[..., None]))


def _loss_weights(visible_flags, alpha_e, normalize_per_token, P):
    """Per-position weights (..., L, T); zero exactly at visible positions."""
    masked = (~visible_flags).astype(np.float64)
    L = visible_flags.shape[-2]
    if normalize_per_token:
        count = masked.sum(axis=(-1, -2), keepdims=True)
        return masked / (count * P)
    return masked * (1.0 / alpha_e) * (1.0 / L)


# ---------------------------------------------------------------------------
# full passes


@dataclass
class PretrainMasks:
    """Masks drawn for one forward pass."""

    T: int
    alpha_e: float
    alpha_la: float
    encoder_visible: np.ndarray  # (B, L, T_vis) sorted patch indices
    la_kept: np.ndarray  # (B, K) sorted indices into the pooled (L * T_vis) tokens
    seed: object = None

    def encoder_masks(self, b: int) -> list:
        return [MaskSpec(self.T, self.alpha_e, v, self.seed) for v in self.encoder_visible[b]]

    def la_mask(self, b: int) -> MaskSpec:
        return MaskSpec(self.encoder_visible.shape[1] * self.encoder_visible.shape[2],
                        self.alpha_la, self.la_kept[b], self.seed)


def draw_masks(cfg: ModelConfig, B: int, L: int, T: int, seed) -> PretrainMasks:
    k = n_visible(T, cfg.alpha_e)
    if k < 1 or k >= T:
        raise ValueError(f"alpha_e={cfg.alpha_e} with T={T} must leave >=1 visible and >=1 masked patch")
    rng = np.random.default_rng(seed)
    enc = _draw_visible(rng, (B, L), T, k)
    n_pool = L * k
    m = n_visible(n_pool, cfg.alpha_la)
    if m < 1:
        raise EmptyLatentSet("empty latent set")
    la = _draw_visible(rng, (B,), n_pool, m)
    return PretrainMasks(T, cfg.alpha_e, cfg.alpha_la, enc, la, seed)


def _batch_arrays(records, cfg):
    names = records[0].lead_names
    if any(r.lead_names != names for r in records):
        raise ValueError("records in a batch must share lead order")
    X = np.stack([record_patches(r, cfg) for r in records])
    return X, cfg.lead_ids(names)


def forward_pretrain(params, cfg: ModelConfig, batch, seed, targets=None, masks: PretrainMasks = None):
    """Masked reconstruction loss averaged over the batch.

    ``targets`` defaults to the batch itself; supplying it separately lets a
    caller alter encoder-hidden content while keeping the objective fixed.
    Returns (loss, reconstructions (B, L, T, P), masks).
    """
    X, lead_ids = _batch_arrays(batch, cfg)
    Y = X if targets is None else _batch_arrays(targets, cfg)[0]
    B, L, T, P = X.shape
    if masks is None:
        masks = draw_masks(cfg, B, L, T, seed)
    enc = masks.encoder_visible
    k = enc.shape[-1]
    vis_patches = np.take_along_axis(X, enc[..., None], axis=2)
    z = _encode(params, cfg, vis_patches.reshape(B * L, k, P), enc.reshape(B * L, k))

    kept = masks.la_kept
    K = kept.shape[1]
    flat = (np.arange(B)[:, None] * (L * k) + kept).reshape(-1)
    pooled = tn.reshape(tn.take(tn.reshape(z, (B * L * k, cfg.d_model)), flat, unique=True), (B, K, cfg.d_model))
    slot = kept // k
    pool_lead = lead_ids[slot]
    patch_idx = np.take_along_axis(enc.reshape(B, L * k), kept, axis=1)

    out, cls = _summary(params, cfg, pooled, pool_lead)
    X_hat = _decode(params, cfg, out, slot * T + patch_idx, cls, lead_ids, T)

    flags = np.zeros((B, L, T), dtype=bool)
    np.put_along_axis(flags, enc, True, axis=2)
    w = _loss_weights(flags, cfg.alpha_e, cfg.normalize_per_token, P) / B
    loss = tn.tensor_sum(tn.mul(tn.square(tn.sub(X_hat, Y)), w[..., None]))
    return loss, X_hat, masks


def forward_record(params, cfg: ModelConfig, record: EcgRecord, visible, la_kept=None):
    """Reconstruct one record under explicit per-lead visibility.

    ``visible`` lists the visible patch indices of each lead (possibly empty);
    ``la_kept`` indexes the pooled token list (lead-major) and defaults to all.
    Returns (X_hat (L, T, P), cls (d,)).
    """
    X = record_patches(record, cfg)
    L, T, P = X.shape
    lead_ids = cfg.lead_ids(record.lead_names)
    visible = [np.sort(np.asarray(v, dtype=np.intp)) for v in visible]
    pieces, tags = [], []
    counts = sorted({len(v) for v in visible if len(v)})
    for c in counts:
        group = [l for l, v in enumerate(visible) if len(v) == c]
        idx = np.stack([visible[l] for l in group])
        z = _encode(params, cfg, X[group][np.arange(len(group))[:, None], idx], idx)
        for j, l in enumerate(group):
            pieces.append(z[j])
            tags.extend((l, t) for t in visible[l])
    if not pieces:
        raise EmptyLatentSet("empty latent set")
    order = np.argsort([l * T + t for l, t in tags], kind="stable")
    pooled = tn.take(tn.concat(pieces, axis=0), order)
    tags = np.array(tags)[order]
    if la_kept is not None:
        la_kept = np.asarray(la_kept, dtype=np.intp)
        if len(la_kept) == 0:
            raise EmptyLatentSet("empty latent set")
        pooled, tags = tn.take(pooled, la_kept), tags[la_kept]
    n = pooled.shape[0]
    out, cls = _summary(params, cfg, tn.reshape(pooled, (1, n, cfg.d_model)), lead_ids[tags[:, 0]][None])
    X_hat = _decode(params, cfg, out, (tags[:, 0] * T + tags[:, 1])[None], cls, lead_ids, T)
    return X_hat[0], cls[0]


def encode_record(params, cfg: ModelConfig, record: EcgRecord) -> LatentSet:
    """Unmasked latents of every lead, pooled lead-major."""
    X = record_patches(record, cfg)
    L, T, _ = X.shape
    z = _encode(params, cfg, X, np.tile(np.arange(T), (L, 1)))
    lead_ids = cfg.lead_ids(record.lead_names)
    return LatentSet(tn.reshape(z, (L * T, cfg.d_model)), np.repeat(lead_ids, T), np.tile(np.arange(T), L))


def embed_batch(params, cfg: ModelConfig, records, visible=None) -> Tensor:
    """Record representations (B, d).

    Every patch is visible unless ``visible`` gives per-lead patch indices
    (B, L, k). LAMAE returns the final CLS state; the independent-lead
    baseline returns the mean of the pooled encoder latents.
    """
    X, lead_ids = _batch_arrays(records, cfg)
    B, L, T, P = X.shape
    idx = np.broadcast_to(np.arange(T), (B, L, T)) if visible is None else np.asarray(visible)
    k = idx.shape[-1]
    patches = np.take_along_axis(X, idx[..., None], axis=2)
    z = tn.reshape(_encode(params, cfg, patches.reshape(B * L, k, P), idx.reshape(B * L, k)), (B, L * k, cfg.d_model))
    if not cfg.latent_attention_enabled:
        return tn.mean(z, axis=1)
    _, cls = _latent_attention(params, cfg, z, np.tile(np.repeat(lead_ids, k), (B, 1)))
    return cls


def embed(params, cfg: ModelConfig, record: EcgRecord) -> Tensor:
    return embed_batch(params, cfg, [record])[0]
