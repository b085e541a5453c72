"""Dual-level collaborative encoder and a standard masked transformer decoder.

Variants (``ModelConfig.variant``) share one code path:

* ``dlct``        region + grid streams, DWSA then LCCA in every layer
* ``no_lcca``     DWSA only, streams concatenated at the end
* ``cbg``         LCCA over the complete bipartite graph
* ``grid_only`` / ``region_only``  a single stream of self-attention layers
* ``concat``      both feature sets joined into one sequence, plain self-attention

``ModelConfig.cra`` selects how positions enter the encoder: ``full`` (absolute
encodings on queries/keys plus the log geometry bias), ``pe_only`` (encodings
added to the inputs once) or ``none``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import geometry as geo
from .attention import mhcra, mhlcca
from .data import FeatureBundle
from .numerics import (
    Tensor,
    add,
    concat,
    dropout,
    embedding,
    layer_norm,
    linear,
    relu,
    scale,
)

VARIANTS = ("dlct", "no_lcca", "cbg", "grid_only", "region_only", "concat")
CRA_MODES = ("full", "pe_only", "none")
PAD_BOX = np.array([0.0, 0.0, 1.0, 1.0])


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    d_ff: int = 256
    vocab_size: int = 32
    max_len: int = 16
    grid_rows: int = 4
    grid_cols: int = 4
    dropout: float = 0.0
    d_region: int = 32
    d_grid: int = 16
    d_geo: int = geo.GEO_DIM
    variant: str = "dlct"
    cra: str = "full"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_model % 4:
            raise ConfigError(f"d_model={self.d_model} not divisible by 4")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.cra not in CRA_MODES:
            raise ConfigError(f"unknown cra mode {self.cra!r}")
        if self.layers < 0:
            raise ConfigError("layers must be non-negative")

    @property
    def layout(self) -> geo.GridLayout:
        return geo.GridLayout(self.grid_rows, self.grid_cols)

    @property
    def uses_regions(self) -> bool:
        return self.variant != "grid_only"

    @property
    def uses_grids(self) -> bool:
        return self.variant != "region_only"

    @property
    def uses_lcca(self) -> bool:
        return self.variant in ("dlct", "cbg")

    @classmethod
    def reference(cls, **kw) -> "ModelConfig":
        base = dict(d_model=512, heads=8, layers=3, d_ff=2048, dropout=0.1, d_region=2048, d_grid=2048,
                    grid_rows=7, grid_cols=7, max_len=20, vocab_size=10000)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- batching --------------------------------------------------------------

@lru_cache(maxsize=16)
def _grid_tables(rows: int, cols: int, d_model: int, d_geo: int):
    layout = geo.GridLayout(rows, cols)
    boxes = layout.boxes()
    gpe = geo.grid_positional_encoding(layout, d_model)
    gg = geo.geometry_features(geo.relative_geometry_matrix(boxes, boxes), d_geo)
    return boxes, gpe, gg


@dataclass
class Batch:
    """Padded features for B images. Region slots beyond ``n_regions`` are padding."""
    region_feats: np.ndarray   # [B, R, d_region]
    region_mask: np.ndarray    # [B, R] bool
    boxes: np.ndarray          # [B, R, 4]
    grid_feats: np.ndarray     # [B, G, d_grid]
    graph_rg: np.ndarray       # [B, R, G] bool cross-level adjacency
    geo_rr: np.ndarray         # [B, R, R, d_geo]
    geo_rg: np.ndarray         # [B, R, G, d_geo]
    geo_gr: np.ndarray         # [B, G, R, d_geo]
    geo_gg: np.ndarray         # [1, G, G, d_geo]
    gpe: np.ndarray            # [1, G, d_model]
    geo_joint: np.ndarray | None = None  # [B, R+G, R+G, d_geo], concat variant only

    @property
    def size(self) -> int:
        return len(self.region_feats)


def collate(bundles: Sequence[FeatureBundle], cfg: ModelConfig) -> Batch:
    if not bundles:
        raise ValueError("collate: empty batch")
    layout = cfg.layout
    for b in bundles:
        if b.layout != layout:
            raise ConfigError(f"bundle grid {b.layout} does not match model grid {layout}")
        if b.region_feats.shape[1] != cfg.d_region or b.grid_feats.shape[1] != cfg.d_grid:
            raise ConfigError(f"feature dims ({b.region_feats.shape[1]}, {b.grid_feats.shape[1]}) do not match "
                              f"configured ({cfg.d_region}, {cfg.d_grid})")
    cell_boxes, gpe, gg = _grid_tables(layout.rows, layout.cols, cfg.d_model, cfg.d_geo)
    B, R, G = len(bundles), max(1, max(b.n_regions for b in bundles)), layout.size
    feats = np.zeros((B, R, cfg.d_region))
    mask = np.zeros((B, R), dtype=bool)
    boxes = np.tile(PAD_BOX, (B, R, 1))
    grids = np.stack([b.grid_feats for b in bundles])
    for i, b in enumerate(bundles):
        n = b.n_regions
        feats[i, :n] = b.region_feats
        mask[i, :n] = True
        boxes[i, :n] = b.boxes
    if cfg.variant == "cbg":
        graph = np.broadcast_to(mask[:, :, None], (B, R, G)).copy()
    else:
        graph = geo.overlap_matrix(boxes, cell_boxes) & mask[:, :, None]
    cells = np.broadcast_to(cell_boxes, (B, G, 4))
    batch = Batch(
        region_feats=feats, region_mask=mask, boxes=boxes, grid_feats=grids, graph_rg=graph,
        geo_rr=geo.geometry_features(geo.relative_geometry_matrix(boxes, boxes), cfg.d_geo),
        geo_rg=geo.geometry_features(geo.relative_geometry_matrix(boxes, cells), cfg.d_geo),
        geo_gr=geo.geometry_features(geo.relative_geometry_matrix(cells, boxes), cfg.d_geo),
        geo_gg=gg[None], gpe=gpe[None],
    )
    if cfg.variant == "concat" and cfg.cra == "full":
        joint = np.concatenate([boxes, cells], axis=1)
        batch.geo_joint = geo.geometry_features(geo.relative_geometry_matrix(joint, joint), cfg.d_geo)
    return batch


# -- parameters ------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _geo_init(rng, d_geo, heads):
    """Small random weights plus unit mass on the slowest cosine slot of each component.

    Those slots are ~1 for any realistic geometry, so the bias starts near 1
    (log near 0) instead of being clamped for half of all pairs.
    """
    w = 0.1 * _xavier(rng, d_geo, heads)
    per = d_geo // 4
    for c in range(4):
        w[c * per + per - 1] += 0.25
    return w


class ParamBuilder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def add(self, name, array):
        self.params[name] = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)

    def linear(self, name, d_in, d_out):
        self.add(f"{name}.w", _xavier(self.rng, d_in, d_out))
        self.add(f"{name}.b", np.zeros(d_out))

    def norm(self, name, d):
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))

    def attention(self, name, d):
        for p in ("q", "k", "v", "o"):
            self.add(f"{name}.w{p}", _xavier(self.rng, d, d))
            self.add(f"{name}.b{p}", np.zeros(d))

    def ffn(self, name, d, d_ff):
        self.linear(f"{name}.1", d, d_ff)
        self.linear(f"{name}.2", d_ff, d)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    pb = ParamBuilder(np.random.default_rng(seed))
    d = cfg.d_model
    if cfg.uses_regions:
        pb.linear("in_r", cfg.d_region, d)
        pb.norm("in_r.ln", d)
        pb.add("rpe.w", _xavier(pb.rng, 4, d, (d, 4)))
    if cfg.uses_grids:
        pb.linear("in_g", cfg.d_grid, d)
        pb.norm("in_g.ln", d)
    if cfg.cra == "full":
        if cfg.variant == "concat":
            pb.add("geo.joint", _geo_init(pb.rng, cfg.d_geo, cfg.heads))
        else:
            if cfg.uses_regions:
                pb.add("geo.rr", _geo_init(pb.rng, cfg.d_geo, cfg.heads))
            if cfg.uses_grids:
                pb.add("geo.gg", _geo_init(pb.rng, cfg.d_geo, cfg.heads))
            if cfg.uses_lcca:
                pb.add("geo.rg", _geo_init(pb.rng, cfg.d_geo, cfg.heads))
                pb.add("geo.gr", _geo_init(pb.rng, cfg.d_geo, cfg.heads))
    streams = ["j"] if cfg.variant == "concat" else [s for s, on in (("r", cfg.uses_regions),
                                                                       ("g", cfg.uses_grids)) if on]
    for l in range(cfg.layers):
        for s in streams:
            pb.attention(f"enc.{l}.sa_{s}", d)
            pb.norm(f"enc.{l}.sa_{s}.ln", d)
            pb.ffn(f"enc.{l}.ff_{s}", d, cfg.d_ff)
            pb.norm(f"enc.{l}.ff_{s}.ln", d)
            if cfg.uses_lcca:
                pb.attention(f"enc.{l}.ca_{s}", d)
                pb.norm(f"enc.{l}.ca_{s}.ln", d)
                pb.ffn(f"enc.{l}.ff2_{s}", d, cfg.d_ff)
                pb.norm(f"enc.{l}.ff2_{s}.ln", d)
    pb.add("dec.emb", pb.rng.normal(0.0, d ** -0.5, size=(cfg.vocab_size, d)))
    for l in range(cfg.layers):
        pb.attention(f"dec.{l}.sa", d)
        pb.norm(f"dec.{l}.sa.ln", d)
        pb.attention(f"dec.{l}.ca", d)
        pb.norm(f"dec.{l}.ca.ln", d)
        pb.ffn(f"dec.{l}.ff", d, cfg.d_ff)
        pb.norm(f"dec.{l}.ff.ln", d)
    pb.linear("out", d, cfg.vocab_size)
    return pb.params


def count_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


# -- model -----------------------------------------------------------------

@dataclass
class EncoderState:
    h_r: Tensor | None
    h_g: Tensor | None
    region_mask: np.ndarray
    graph_rg: np.ndarray
    rpe: Tensor | None = None
    gpe: Tensor | None = None
    omega: dict[str, Tensor] = field(default_factory=dict)
    joint_pos: Tensor | None = None


class DLCT:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.training = False
        self.rng = np.random.default_rng(seed + 1)
        self.record = False
        self.records: list[tuple[int, str, np.ndarray]] = []

    # -- small helpers -------------------------------------------------
    def _p(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.cfg.dropout, self.rng, self.training)

    def _ffn(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        h = self._drop(relu(linear(x, p[f"{name}.1.w"], p[f"{name}.1.b"])))
        return linear(h, p[f"{name}.2.w"], p[f"{name}.2.b"])

    def _sublayer(self, ln_name: str, x: Tensor, update: Tensor) -> Tensor:
        return self._ln(ln_name, add(x, self._drop(update)))

    def _keep(self, layer: int, name: str, weights: Tensor) -> None:
        if self.record:
            self.records.append((layer, name, np.array(weights.data)))

    def _attn_kw(self):
        return dict(attn_dropout=self.cfg.dropout, rng=self.rng, training=self.training)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self, flag: bool = True) -> "DLCT":
        self.training = flag
        return self

    def eval(self) -> "DLCT":
        return self.train(False)

    def batch(self, bundles) -> Batch:
        if isinstance(bundles, Batch):
            return bundles
        if isinstance(bundles, FeatureBundle):
            bundles = [bundles]
        return collate(bundles, self.cfg)

    # -- encoder ---------------------------------------------------------
    def input_projection(self, batch: Batch) -> EncoderState:
        cfg, p = self.cfg, self.params
        full = cfg.cra == "full"
        h_r = h_g = rpe = gpe = None
        if cfg.uses_regions:
            h_r = self._ln("in_r.ln", relu(linear(Tensor(batch.region_feats), p["in_r.w"], p["in_r.b"])))
            if cfg.cra != "none":
                rpe = geo.region_positional_encoding(batch.boxes, p["rpe.w"])
        if cfg.uses_grids:
            h_g = self._ln("in_g.ln", relu(linear(Tensor(batch.grid_feats), p["in_g.w"], p["in_g.b"])))
            if cfg.cra != "none":
                gpe = Tensor(batch.gpe)
        state = EncoderState(h_r, h_g, batch.region_mask, batch.graph_rg, rpe, gpe)
        if cfg.cra == "pe_only":
            if h_r is not None:
                state.h_r = add(h_r, rpe)
            if h_g is not None:
                state.h_g = add(h_g, gpe)
            state.rpe = state.gpe = None
        if full:
            if cfg.variant == "concat":
                state.omega["joint"] = geo.geometry_bias(batch.geo_joint, p["geo.joint"])
            else:
                if cfg.uses_regions:
                    state.omega["rr"] = geo.geometry_bias(batch.geo_rr, p["geo.rr"])
                if cfg.uses_grids:
                    state.omega["gg"] = geo.geometry_bias(batch.geo_gg, p["geo.gg"])
                if cfg.uses_lcca:
                    state.omega["rg"] = geo.geometry_bias(batch.geo_rg, p["geo.rg"])
                    state.omega["gr"] = geo.geometry_bias(batch.geo_gr, p["geo.gr"])
        if cfg.variant == "concat":
            B, R = batch.region_mask.shape
            state.h_r = concat([state.h_r, state.h_g], axis=1)
            state.h_g = None
            if full:
                gpe_b = Tensor(np.broadcast_to(batch.gpe, (B,) + batch.gpe.shape[1:]))
                state.joint_pos = concat([rpe, gpe_b], axis=1)
            state.region_mask = np.concatenate([batch.region_mask, np.ones((B, batch.grid_feats.shape[1]), bool)], 1)
        return state

    def _self_block(self, l: int, s: str, h: Tensor, pos, omega, key_mask) -> Tensor:
        name = f"enc.{l}.sa_{s}"
        out = mhcra(h, h, h, self._p(name), self.cfg.heads, pos_q=pos, pos_k=pos, omega=omega,
                    key_mask=key_mask, **self._attn_kw())
        self._keep(l, f"dwsa_{s}", out.weights)
        c = self._sublayer(f"{name}.ln", h, out.values)
        return self._sublayer(f"enc.{l}.ff_{s}.ln", c, self._ffn(f"enc.{l}.ff_{s}", c))

    def dwsa_layer(self, state: EncoderState, l: int) -> tuple[Tensor | None, Tensor | None]:
        """Independent relation-aware self-attention + FFN on each level."""
        c_r = c_g = None
        if state.h_r is not None:
            key_mask = _nonempty(state.region_mask)[:, None, :]
            s = "j" if self.cfg.variant == "concat" else "r"
            pos = state.joint_pos if s == "j" else state.rpe
            omega = state.omega.get("joint" if s == "j" else "rr")
            c_r = self._self_block(l, s, state.h_r, pos, omega, key_mask)
        if state.h_g is not None:
            c_g = self._self_block(l, "g", state.h_g, state.gpe, state.omega.get("gg"), None)
        return c_r, c_g

    def lcca_layer(self, c_r: Tensor, c_g: Tensor, state: EncoderState, l: int) -> tuple[Tensor, Tensor]:
        """Graph-constrained cross attention in both directions + FFN."""
        heads, kw = self.cfg.heads, self._attn_kw()
        m_r = mhlcca(c_r, c_g, self._p(f"enc.{l}.ca_r"), heads, pos_src=state.rpe, pos_tgt=state.gpe,
                     omega=state.omega.get("rg"), graph_mask=state.graph_rg, **kw)
        m_g = mhlcca(c_g, c_r, self._p(f"enc.{l}.ca_g"), heads, pos_src=state.gpe, pos_tgt=state.rpe,
                     omega=state.omega.get("gr"), graph_mask=np.swapaxes(state.graph_rg, -1, -2), **kw)
        self._keep(l, "lcca_r->g", m_r.weights)
        self._keep(l, "lcca_g->r", m_g.weights)
        h_r = self._sublayer(f"enc.{l}.ca_r.ln", c_r, m_r.values)
        h_g = self._sublayer(f"enc.{l}.ca_g.ln", c_g, m_g.values)
        h_r = self._sublayer(f"enc.{l}.ff2_r.ln", h_r, self._ffn(f"enc.{l}.ff2_r", h_r))
        h_g = self._sublayer(f"enc.{l}.ff2_g.ln", h_g, self._ffn(f"enc.{l}.ff2_g", h_g))
        return h_r, h_g

    def encode_batch(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        """Returns memory [B, M, d] and its validity mask [B, M]."""
        state = self.input_projection(batch)
        for l in range(self.cfg.layers):
            c_r, c_g = self.dwsa_layer(state, l)
            if self.cfg.uses_lcca:
                c_r, c_g = self.lcca_layer(c_r, c_g, state, l)
            state.h_r, state.h_g = c_r, c_g
        parts, masks = [], []
        if state.h_r is not None:
            parts.append(state.h_r)
            masks.append(state.region_mask)
        if state.h_g is not None:
            parts.append(state.h_g)
            masks.append(np.ones(state.h_g.shape[:2], dtype=bool))
        memory = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        return memory, _nonempty(np.concatenate(masks, axis=1))

    def encode(self, bundle: FeatureBundle) -> Tensor:
        """Encoder output for one image: [N_R + N_G, d_model], regions first."""
        memory, mask = self.encode_batch(self.batch([bundle]))
        return memory[0, np.nonzero(mask[0])[0]]

    # -- decoder ---------------------------------------------------------
    def decode(self, memory: Tensor, memory_mask: np.ndarray, tokens) -> Tensor:
        """Next-token logits [B, T, vocab] for teacher-forced ``tokens`` [B, T]."""
        cfg, p = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        T = tokens.shape[1]
        if T > cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len={cfg.max_len}")
        d = cfg.d_model
        x = add(scale(embedding(p["dec.emb"], tokens), math.sqrt(d)), Tensor(_word_pe(cfg.max_len, d)[:T]))
        x = self._drop(x)
        causal = np.tril(np.ones((T, T), dtype=bool))[None]
        mem_mask = np.asarray(memory_mask, dtype=bool)[:, None, :]
        for l in range(cfg.layers):
            sa = mhcra(x, x, x, self._p(f"dec.{l}.sa"), cfg.heads, key_mask=causal, **self._attn_kw())
            x = self._sublayer(f"dec.{l}.sa.ln", x, sa.values)
            ca = mhcra(x, memory, memory, self._p(f"dec.{l}.ca"), cfg.heads, key_mask=mem_mask,
                       **self._attn_kw())
            self._keep(l, "dec_cross", ca.weights)
            x = self._sublayer(f"dec.{l}.ca.ln", x, ca.values)
            x = self._sublayer(f"dec.{l}.ff.ln", x, self._ffn(f"dec.{l}.ff", x))
        return linear(x, p["out.w"], p["out.b"])

    def forward(self, bundles, tokens) -> Tensor:
        memory, mask = self.encode_batch(self.batch(bundles))
        return self.decode(memory, mask, tokens)


def _nonempty(mask: np.ndarray) -> np.ndarray:
    # an image with no valid slot attends over its padding; the output is unused
    return mask | ~mask.any(axis=-1, keepdims=True)


@lru_cache(maxsize=8)
def _word_pe(max_len: int, d: int) -> np.ndarray:
    return geo.sinusoid(np.arange(max_len), d)
