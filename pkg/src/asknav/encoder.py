"""Cross-modal encoder over dialog words, object tags, and panoramic regions.

The input sequence is [CLS] [TAR] hint [NAV] q_1 [GUIDE] a_1 ... [SEP]
tag_1 ... tag_R [SEP] followed by R region embeddings. Words and tags get
learned position embeddings; regions instead carry their geometry and a
fixed trigonometric direction embedding, so region order carries no signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError
from .vocab import CLS, GUIDE, NAV, SEP, SPECIAL_TOKENS, TAR, Vocabulary
from .world import GEOMETRY_DIM

DIRECTION_DIM = 128
ENCODER_VERSION = 1

SEG_WORD, SEG_TAG, SEG_REGION = 0, 1, 2


def build_direction_embedding(heading, elevation, dim=DIRECTION_DIM):
    """Tile [sin h, cos h, sin e, cos e] out to `dim` entries."""
    if dim % 4 != 0:
        raise ConfigError("direction embedding dim must be a multiple of 4")
    base = np.array(
        [math.sin(heading), math.cos(heading), math.sin(elevation), math.cos(elevation)],
        dtype=np.float32,
    )
    return np.tile(base, dim // 4)


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 256
    max_len: int = 256
    feature_dim: int = 64
    direction_dim: int = DIRECTION_DIM
    dropout: float = 0.0

    def validate(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError("hidden_dim must divide evenly into num_heads")
        if self.direction_dim != self.hidden_dim:
            raise ConfigError(
                "direction_dim must equal hidden_dim; region embeddings are "
                "projection(feature, geometry) + direction"
            )
        if self.direction_dim % 4 != 0:
            raise ConfigError("direction_dim must be a multiple of 4")
        if self.max_len < 8:
            raise ConfigError("max_len too small to hold a hint")


@dataclass(frozen=True)
class EncoderInput:
    """One assembled example. token_ids covers words then tags (with SEPs);
    the regions ride along as dense arrays. Tag tokens usually mirror the
    region tags one-to-one but may be replaced wholesale (pollution)."""

    token_ids: np.ndarray  # [Lt] int64
    segment_ids: np.ndarray  # [Lt] int64, SEG_WORD / SEG_TAG
    word_len: int  # tokens before the tag segment starts
    tag_class_ids: np.ndarray  # [T] detector-class ids, aligned with tag tokens
    region_features: np.ndarray  # [R, P] float32
    region_geometry: np.ndarray  # [R, 6] float32
    region_directions: np.ndarray  # [R, direction_dim] float32
    region_views: np.ndarray  # [R] int64 view index of each region

    @property
    def num_regions(self):
        return self.region_features.shape[0]

    @property
    def num_tags(self):
        return len(self.tag_class_ids)

    @property
    def total_len(self):
        return len(self.token_ids) + self.num_regions


def dialog_word_tokens(history, budget=None):
    """Word-segment token strings for a history, oldest exchanges dropped
    first when a budget is given. The hint is never dropped."""
    def build(exchanges):
        toks = [CLS, TAR] + list(history.hint)
        for q, a in exchanges:
            toks += [NAV] + list(q) + [GUIDE] + list(a)
        return toks + [SEP]

    exchanges = list(history.exchanges)
    toks = build(exchanges)
    if budget is not None:
        while len(toks) > budget and exchanges:
            exchanges.pop(0)
            toks = build(exchanges)
        if len(toks) > budget:
            raise DataError(
                f"hint alone needs {len(toks)} tokens but only {budget} fit"
            )
    return toks


def tag_list(obs):
    """(class_id, name) pairs for an observation's regions, in region order."""
    return [(region.tag, region.tag_name) for _, region in obs.all_regions()]


def assemble_input(vocab, history, obs, cfg, tags=None):
    """Build the Word-Tag-Image input for one observation and history.

    tags defaults to the observation's own (class, name) pairs; pass a
    different list to decouple the tag segment from the regions.
    """
    regions = list(obs.all_regions())
    n = len(regions)
    if tags is None:
        tags = tag_list(obs)
    tags = list(tags)
    # words + (tags + SEP) + regions must fit in max_len
    budget = cfg.max_len - (len(tags) + 1 + n)
    words = dialog_word_tokens(history, budget=budget)
    word_ids = vocab.encode(words)

    feats = np.zeros((n, cfg.feature_dim), dtype=np.float32)
    geoms = np.zeros((n, GEOMETRY_DIM), dtype=np.float32)
    dirs = np.zeros((n, cfg.direction_dim), dtype=np.float32)
    view_idx = np.zeros(n, dtype=np.int64)
    for i, (view, region) in enumerate(regions):
        feats[i] = region.feature
        geoms[i] = region.geometry
        dirs[i] = build_direction_embedding(view.pose[0], view.pose[1], cfg.direction_dim)
        view_idx[i] = view.index
    tag_ids = vocab.encode([name for _, name in tags]) + [vocab.sep_id]

    token_ids = np.array(word_ids + tag_ids, dtype=np.int64)
    segment_ids = np.array(
        [SEG_WORD] * len(word_ids) + [SEG_TAG] * len(tag_ids), dtype=np.int64
    )
    return EncoderInput(
        token_ids=token_ids,
        segment_ids=segment_ids,
        word_len=len(word_ids),
        tag_class_ids=np.array([c for c, _ in tags], dtype=np.int64),
        region_features=feats,
        region_geometry=geoms,
        region_directions=dirs,
        region_views=view_idx,
    )


def collate_inputs(inputs, pad_id, max_len):
    """Pad a list of EncoderInputs into one batch of tensors."""
    for x in inputs:
        if x.total_len > max_len:
            raise DataError(
                f"sequence of length {x.total_len} exceeds the encoder limit {max_len}"
            )
    b = len(inputs)
    lt = max(len(x.token_ids) for x in inputs)
    lr = max(max(x.num_regions for x in inputs), 1)
    p = inputs[0].region_features.shape[1]
    d = inputs[0].region_directions.shape[1]

    token_ids = torch.full((b, lt), pad_id, dtype=torch.long)
    positions = torch.zeros((b, lt), dtype=torch.long)
    segments = torch.zeros((b, lt), dtype=torch.long)
    token_mask = torch.zeros((b, lt), dtype=torch.bool)
    feats = torch.zeros((b, lr, p))
    geoms = torch.zeros((b, lr, GEOMETRY_DIM))
    dirs = torch.zeros((b, lr, d))
    region_mask = torch.zeros((b, lr), dtype=torch.bool)
    word_len = torch.zeros(b, dtype=torch.long)
    token_len = torch.zeros(b, dtype=torch.long)
    num_regions = torch.zeros(b, dtype=torch.long)

    for i, x in enumerate(inputs):
        t = len(x.token_ids)
        r = x.num_regions
        token_ids[i, :t] = torch.from_numpy(x.token_ids)
        positions[i, :t] = torch.arange(t)
        segments[i, :t] = torch.from_numpy(x.segment_ids)
        token_mask[i, :t] = True
        if r:
            feats[i, :r] = torch.from_numpy(x.region_features)
            geoms[i, :r] = torch.from_numpy(x.region_geometry)
            dirs[i, :r] = torch.from_numpy(x.region_directions)
            region_mask[i, :r] = True
        word_len[i] = x.word_len
        token_len[i] = t
        num_regions[i] = r

    return {
        "token_ids": token_ids,
        "positions": positions,
        "segments": segments,
        "token_mask": token_mask,
        "region_features": feats,
        "region_geometry": geoms,
        "region_directions": dirs,
        "region_mask": region_mask,
        "word_len": word_len,
        "token_len": token_len,
        "num_regions": num_regions,
    }


class TransformerLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            cfg.hidden_dim, cfg.num_heads, dropout=cfg.dropout, batch_first=True
        )
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.ff = nn.Sequential(
            nn.Linear(cfg.hidden_dim, cfg.ff_dim),
            nn.GELU(),
            nn.Linear(cfg.ff_dim, cfg.hidden_dim),
        )
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask):
        a, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.norm1(x + self.drop(a))
        x = self.norm2(x + self.drop(self.ff(x)))
        return x


class CrossModalEncoder(nn.Module):
    """Bidirectional self-attention over the joint word/tag/region sequence."""

    def __init__(self, cfg, vocab_size):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        h = cfg.hidden_dim
        self.tok_embed = nn.Embedding(vocab_size, h, padding_idx=0)
        self.pos_embed = nn.Embedding(cfg.max_len, h)
        self.seg_embed = nn.Embedding(3, h)
        self.region_proj = nn.Linear(cfg.feature_dim + GEOMETRY_DIM, h)
        self.embed_norm = nn.LayerNorm(h)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, batch):
        """Returns hidden states [B, Lt + Lr, H]; tokens first, regions after.
        CLS is position 0 of every row."""
        dtype = self.tok_embed.weight.dtype
        tok = (
            self.tok_embed(batch["token_ids"])
            + self.pos_embed(batch["positions"])
            + self.seg_embed(batch["segments"])
        )
        reg = (
            self.region_proj(
                torch.cat(
                    [batch["region_features"], batch["region_geometry"]], dim=-1
                ).to(dtype)
            )
            + batch["region_directions"].to(dtype)
            + self.seg_embed(
                torch.full_like(batch["region_mask"], SEG_REGION, dtype=torch.long)
            )
        )
        x = torch.cat([tok, reg], dim=1)
        x = self.drop(self.embed_norm(x))
        pad = ~torch.cat([batch["token_mask"], batch["region_mask"]], dim=1)
        for layer in self.layers:
            x = layer(x, pad)
        return x

    def encode(self, inputs, vocab):
        """Inference-mode forward over a list of EncoderInputs."""
        single = isinstance(inputs, EncoderInput)
        if single:
            inputs = [inputs]
        batch = collate_inputs(inputs, vocab.pad_id, self.cfg.max_len)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            hidden = self.forward(batch)
        if was_training:
            self.train()
        return (hidden[0], batch) if single else (hidden, batch)


def save_encoder(model, vocab, path, extra=None):
    torch.save(
        {
            "version": ENCODER_VERSION,
            "config": asdict(model.cfg),
            "vocab": list(vocab.id_to_token),
            "state": model.state_dict(),
            "extra": dict(extra or {}),
        },
        path,
    )


def load_encoder(path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("version") != ENCODER_VERSION:
        raise DataError(f"{path}: unsupported encoder checkpoint version")
    cfg = EncoderConfig(**blob["config"])
    vocab = Vocabulary(blob["vocab"][len(SPECIAL_TOKENS):])
    model = CrossModalEncoder(cfg, vocab_size=len(vocab))
    model.load_state_dict(blob["state"])
    model.eval()
    return model, vocab, blob.get("extra", {})
