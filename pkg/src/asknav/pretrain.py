"""Two-stage pre-training over the cross-modal encoder.

Stage 1 pairs templated captions with single views and trains masked-token
prediction plus a matched/polluted contrastive head. Stage 2 moves to
dialog-navigation data: masked words (MLM), masked object tags predicted
over detector classes (MOTP), and a CLS head grounding the next ground
truth step into one of the 36 view bins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dialog import DialogHistory
from .encoder import (
    SEG_TAG,
    SEG_WORD,
    CrossModalEncoder,
    EncoderConfig,
    assemble_input,
    collate_inputs,
    tag_list,
)
from .errors import ConfigError, DataError
from .vocab import SPECIAL_TOKENS, vocabulary_for_world
from .world import NUM_VIEWS, AgentState, bearing, observe, view_bin

MASK_RATE = 0.15
POLLUTE_RATE = 0.5
DETECTOR_CLASSES = 64

IGNORE = -100

REPORT_SCHEMA = "asknav.pretrain-report"
REPORT_VERSION = 1

CURVE_KEYS = ("stage1_mtl", "stage1_cl", "mlm", "motp", "directional")


@dataclass(frozen=True)
class CurriculumFlags:
    """Which parts of the two-stage curriculum run; one axis per ablation row."""

    stage1_contrastive_mlm: bool = True
    stage1_object_tags: bool = True
    stage2_mlm: bool = True
    stage2_motp: bool = True
    stage2_directional: bool = True

    @property
    def stage1(self):
        return self.stage1_contrastive_mlm

    @property
    def stage2(self):
        return self.stage2_mlm or self.stage2_motp or self.stage2_directional

    @property
    def any(self):
        return self.stage1 or self.stage2


@dataclass(frozen=True)
class PretrainConfig:
    stage1_steps: int = 200
    stage2_steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    clip_norm: float = 1.0
    mask_rate: float = MASK_RATE
    pollute_rate: float = POLLUTE_RATE
    detector_classes: int = DETECTOR_CLASSES

    def validate(self):
        if not (0.0 <= self.mask_rate < 1.0):
            raise ConfigError("mask_rate must be in [0, 1)")
        if not (0.0 <= self.pollute_rate <= 1.0):
            raise ConfigError("pollute_rate must be a probability")
        if self.batch_size < 1 or self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("batch and step counts must be positive")


# ---------------------------------------------------------------------------
# Masking and pollution primitives (raw id sequences in, ids + labels out)


def mask_tokens(token_ids, rng, rate=MASK_RATE, mask_id=4, num_special=len(SPECIAL_TOKENS)):
    """Independently mask each non-special token with probability `rate`.

    Returns (masked_ids, labels); labels hold the original id at masked
    positions and IGNORE elsewhere. Special tokens (id < num_special) are
    never touched.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    draws = rng.random(ids.shape)
    hit = (draws < rate) & (ids >= num_special)
    labels = np.where(hit, ids, IGNORE)
    masked = np.where(hit, mask_id, ids)
    return masked, labels


def pollute_tags(tag_class_ids, rng, tag_pool, rate=POLLUTE_RATE):
    """With probability `rate` replace the whole tag set with random pool
    classes and return y = 0 (polluted); otherwise unchanged, y = 1."""
    tag_pool = np.asarray(tag_pool, dtype=np.int64)
    if tag_pool.size == 0:
        raise DataError("tag pool is empty")
    tags = np.asarray(tag_class_ids, dtype=np.int64)
    if rng.random() < rate:
        replacement = tag_pool[rng.integers(0, tag_pool.size, size=tags.shape)]
        return replacement, 0
    return tags.copy(), 1


# ---------------------------------------------------------------------------
# Batches and heads


@dataclass
class PretrainBatch:
    """Collated encoder tensors plus whatever labels the active losses need."""

    tensors: dict
    mlm_labels: torch.Tensor = None  # [B, Lt] vocab ids or IGNORE
    motp_labels: torch.Tensor = None  # [B, Lt] detector classes or IGNORE
    contrastive_labels: torch.Tensor = None  # [B] float 0/1, 1 = clean
    direction_labels: torch.Tensor = None  # [B] view bins, or None


class PretrainHeads(nn.Module):
    """Output heads for the four objectives, zero-initialized so each loss
    starts exactly at its uniform-predictor value."""

    def __init__(self, hidden_dim, vocab_size, detector_classes=DETECTOR_CLASSES):
        super().__init__()
        if detector_classes == vocab_size:
            raise ConfigError(
                "detector class count must differ from the vocabulary size; "
                "tag prediction is over detector classes, not tokens"
            )
        self.vocab_size = vocab_size
        self.detector_classes = detector_classes
        self.mlm = nn.Linear(hidden_dim, vocab_size)
        self.motp = nn.Linear(hidden_dim, detector_classes)
        self.contrastive = nn.Linear(hidden_dim, 1)
        self.direction = nn.Linear(hidden_dim, NUM_VIEWS)
        for lin in (self.mlm, self.motp, self.contrastive, self.direction):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


def _token_hidden(hidden, batch):
    """Token-position slice of the joint hidden states."""
    lt = batch["token_ids"].shape[1]
    return hidden[:, :lt]


def _masked_ce(logits, labels):
    """Mean CE over labeled positions; contributes 0 when none are labeled."""
    flat = logits.reshape(-1, logits.shape[-1])
    labels = labels.reshape(-1)
    if (labels != IGNORE).sum() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(flat, labels, ignore_index=IGNORE)


def loss_stage1(model, heads, batch):
    """Masked-token loss over words and tags plus the contrastive loss."""
    if batch.contrastive_labels is None:
        raise DataError("stage-1 batch is missing contrastive labels")
    hidden = model(batch.tensors)
    tok = _token_hidden(hidden, batch.tensors)
    mtl = _masked_ce(heads.mlm(tok), batch.mlm_labels)
    logits = heads.contrastive(hidden[:, 0]).squeeze(-1)
    cl = F.binary_cross_entropy_with_logits(
        logits, batch.contrastive_labels.to(logits.dtype)
    )
    return mtl + cl, {"stage1_mtl": float(mtl.detach()), "stage1_cl": float(cl.detach())}


def loss_mlm(model, heads, batch):
    """Masked word prediction over the full vocabulary."""
    hidden = model(batch.tensors)
    loss = _masked_ce(heads.mlm(_token_hidden(hidden, batch.tensors)), batch.mlm_labels)
    return loss, {"mlm": float(loss.detach())}


def loss_motp(model, heads, batch):
    """Masked object-tag prediction over detector classes, not the vocab."""
    hidden = model(batch.tensors)
    loss = _masked_ce(heads.motp(_token_hidden(hidden, batch.tensors)), batch.motp_labels)
    return loss, {"motp": float(loss.detach())}


def loss_directional(model, heads, batch):
    """CLS-state classification into the 36 view bins."""
    if batch.direction_labels is None:
        raise DataError("directional grounding needs a view-bin label per sample")
    labels = batch.direction_labels
    if labels.min() < 0 or labels.max() >= NUM_VIEWS:
        raise DataError("view-bin labels must lie in [0, 36)")
    hidden = model(batch.tensors)
    loss = F.cross_entropy(heads.direction(hidden[:, 0]), labels)
    return loss, {"directional": float(loss.detach())}


# ---------------------------------------------------------------------------
# Corpus synthesis


@dataclass(frozen=True)
class CaptionExample:
    """A single view paired with a templated caption over its tags."""

    world_id: str
    node: int
    view_index: int
    caption: tuple


class _SingleView:
    """Adapter presenting one view as an observation (all_regions only)."""

    def __init__(self, view):
        self.view = view

    def all_regions(self):
        for region in self.view.regions:
            yield self.view, region


def caption_tokens(view, region_name):
    names = []
    for region in view.regions:
        if region.tag_name not in names:
            names.append(region.tag_name)
    toks = ["a", "photo", "of", "the", names[0]]
    if len(names) > 1:
        toks += ["near", "the", names[1]]
    toks += ["in", "the", region_name]
    return tuple(toks)


def make_caption_corpus(worlds, seed, count):
    """Sample (node, view) pairs across worlds and caption them."""
    worlds = list(worlds)
    if not worlds:
        raise ConfigError("caption corpus needs at least one world")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCAB]))
    corpus = []
    for _ in range(count):
        w = worlds[int(rng.integers(len(worlds)))]
        node = int(rng.integers(w.num_nodes))
        view_index = int(rng.integers(NUM_VIEWS))
        view = observe(w, AgentState(node=node)).views[view_index]
        corpus.append(
            CaptionExample(
                world_id=w.world_id,
                node=node,
                view_index=view_index,
                caption=caption_tokens(view, w.region_of[node]),
            )
        )
    return corpus


def direction_label_for(world, instance, step=0):
    """View bin of the supervision move at `step`, or None for a lone STOP."""
    if len(instance.path) < step + 2:
        return None
    h, e = bearing(world, instance.path[step], instance.path[step + 1])
    return view_bin(h, e)


# ---------------------------------------------------------------------------
# Batch assembly


def _collate(inputs, vocab, enc_cfg):
    return collate_inputs(inputs, vocab.pad_id, enc_cfg.max_len)


def _label_pad(rows, width):
    out = np.full((len(rows), width), IGNORE, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, : len(row)] = row
    return torch.from_numpy(out)


def build_stage1_batch(examples, worlds, vocab, enc_cfg, rng, cfg, use_tags=True):
    """Pollute, mask, and collate a stage-1 caption batch."""
    inputs, mlm_rows, y = [], [], []
    for ex in examples:
        world = worlds[ex.world_id]
        view = observe(world, AgentState(node=ex.node)).views[ex.view_index]
        sv = _SingleView(view)
        history = DialogHistory(hint=ex.caption)
        if use_tags:
            own = tag_list(sv)
            tag_pool = np.arange(len(world.object_vocab))
            classes, clean = pollute_tags([c for c, _ in own], rng, tag_pool, cfg.pollute_rate)
            names = [world.object_vocab[int(c)] for c in classes]
            x = assemble_input(vocab, history, sv, enc_cfg, tags=list(zip(classes, names)))
        else:
            # no tag segment: pollution swaps in a random other view's regions
            clean = 1
            if rng.random() < cfg.pollute_rate:
                clean = 0
                w2 = worlds[ex.world_id]
                node2 = int(rng.integers(w2.num_nodes))
                view2 = int(rng.integers(NUM_VIEWS))
                sv = _SingleView(observe(w2, AgentState(node=node2)).views[view2])
            x = assemble_input(vocab, history, sv, enc_cfg, tags=())
        masked, labels = mask_tokens(
            x.token_ids, rng, rate=cfg.mask_rate, mask_id=vocab.mask_id
        )
        inputs.append(replace(x, token_ids=masked))
        mlm_rows.append(labels)
        y.append(clean)
    tensors = _collate(inputs, vocab, enc_cfg)
    return PretrainBatch(
        tensors=tensors,
        mlm_labels=_label_pad(mlm_rows, tensors["token_ids"].shape[1]),
        contrastive_labels=torch.tensor(y, dtype=torch.float32),
    )


def build_stage2_batch(instances, worlds, vocab, enc_cfg, rng, cfg, flags):
    """Mask words and tags on dialog-navigation inputs with labels for the
    enabled stage-2 objectives."""
    inputs, mlm_rows, motp_rows, dir_labels = [], [], [], []
    for inst in instances:
        world = worlds[inst.world_id]
        # ground a random point along the demonstration, not just its start
        t = int(rng.integers(len(inst.path) - 1)) if len(inst.path) >= 2 else 0
        obs = observe(world, AgentState(node=inst.path[t]))
        x = assemble_input(vocab, inst.history, obs, enc_cfg)
        ids = x.token_ids
        word_part = ids[: x.word_len]
        tag_part = ids[x.word_len :]

        mlm_row = np.full(len(ids), IGNORE, dtype=np.int64)
        motp_row = np.full(len(ids), IGNORE, dtype=np.int64)
        if flags.stage2_mlm:
            masked_words, wl = mask_tokens(word_part, rng, cfg.mask_rate, vocab.mask_id)
            word_part = masked_words
            mlm_row[: x.word_len] = wl
        if flags.stage2_motp:
            masked_tags, tl = mask_tokens(tag_part, rng, cfg.mask_rate, vocab.mask_id)
            # class labels live at the masked tag-token positions
            for j in range(x.num_tags):
                if tl[j] != IGNORE:
                    motp_row[x.word_len + j] = x.tag_class_ids[j]
            tag_part = masked_tags
        ids = np.concatenate([word_part, tag_part])
        inputs.append(replace(x, token_ids=ids))
        mlm_rows.append(mlm_row)
        motp_rows.append(motp_row)
        if flags.stage2_directional:
            label = direction_label_for(world, inst, t)
            if label is None:
                raise DataError(
                    "directional grounding needs instances with at least one step"
                )
            dir_labels.append(label)
    tensors = _collate(inputs, vocab, enc_cfg)
    width = tensors["token_ids"].shape[1]
    return PretrainBatch(
        tensors=tensors,
        mlm_labels=_label_pad(mlm_rows, width),
        motp_labels=_label_pad(motp_rows, width),
        direction_labels=(
            torch.tensor(dir_labels, dtype=torch.long) if dir_labels else None
        ),
    )


# ---------------------------------------------------------------------------
# The curriculum runner


@dataclass
class PretrainDatasets:
    worlds: dict  # world_id -> World
    captions: list = None  # CaptionExample list (stage 1)
    nav: list = None  # NavInstance list (stage 2)


def run_pretraining(
    datasets,
    flags,
    cfg=None,
    enc_cfg=None,
    seed=0,
    report_path=None,
):
    """Run the flagged curriculum; returns (model, heads, vocab, report).

    With every flag off the model is returned exactly at initialization.
    Deterministic for a fixed seed. A report row is appended per step.
    """
    cfg = cfg or PretrainConfig()
    cfg.validate()
    enc_cfg = enc_cfg or EncoderConfig()
    if flags.stage1 and not datasets.captions:
        raise ConfigError("stage-1 flags are set but no caption data was given")
    if flags.stage2 and not datasets.nav:
        raise ConfigError("stage-2 flags are set but no navigation data was given")
    if flags.stage2_directional and datasets.nav:
        usable = [i for i in datasets.nav if len(i.path) >= 2]
        if not usable:
            raise ConfigError("directional grounding needs paths with at least one step")

    some_world = next(iter(datasets.worlds.values()))
    vocab = vocabulary_for_world(some_world)

    torch.manual_seed(seed)
    model = CrossModalEncoder(enc_cfg, vocab_size=len(vocab))
    heads = PretrainHeads(enc_cfg.hidden_dim, len(vocab), cfg.detector_classes)

    rows = []
    curves = {k: [] for k in CURVE_KEYS}

    def record(stage, step, parts):
        row = {"stage": stage, "step": step}
        row.update({k: round(v, 6) for k, v in parts.items()})
        rows.append(row)
        for k, v in parts.items():
            curves[k].append(v)

    if flags.any:
        opt = torch.optim.Adam(
            list(model.parameters()) + list(heads.parameters()), lr=cfg.lr
        )
        params = list(model.parameters()) + list(heads.parameters())

        if flags.stage1:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
            pool = datasets.captions
            for step in range(cfg.stage1_steps):
                picks = [pool[int(rng.integers(len(pool)))] for _ in range(cfg.batch_size)]
                batch = build_stage1_batch(
                    picks, datasets.worlds, vocab, enc_cfg, rng, cfg,
                    use_tags=flags.stage1_object_tags,
                )
                loss, parts = loss_stage1(model, heads, batch)
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                record(1, step, parts)

        if flags.stage2:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
            pool = datasets.nav
            if flags.stage2_directional:
                pool = [i for i in pool if len(i.path) >= 2]
            for step in range(cfg.stage2_steps):
                picks = [pool[int(rng.integers(len(pool)))] for _ in range(cfg.batch_size)]
                batch = build_stage2_batch(
                    picks, datasets.worlds, vocab, enc_cfg, rng, cfg, flags
                )
                hidden = model(batch.tensors)
                tok = _token_hidden(hidden, batch.tensors)
                total = hidden.sum() * 0.0
                parts = {}
                if flags.stage2_mlm:
                    l = _masked_ce(heads.mlm(tok), batch.mlm_labels)
                    total = total + l
                    parts["mlm"] = float(l.detach())
                if flags.stage2_motp:
                    l = _masked_ce(heads.motp(tok), batch.motp_labels)
                    total = total + l
                    parts["motp"] = float(l.detach())
                if flags.stage2_directional:
                    l = F.cross_entropy(
                        heads.direction(hidden[:, 0]), batch.direction_labels
                    )
                    total = total + l
                    parts["directional"] = float(l.detach())
                opt.zero_grad()
                total.backward()
                nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                record(2, step, parts)

    report = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "seed": int(seed),
        "flags": asdict(flags),
        "config": asdict(cfg),
        "curves": {k: v for k, v in curves.items() if v},
        "steps": len(rows),
    }
    if report_path is not None:
        with open(report_path, "w") as f:
            json.dump({"schema": REPORT_SCHEMA, "version": REPORT_VERSION}, f, sort_keys=True)
            f.write("\n")
            for row in rows:
                json.dump(row, f, sort_keys=True)
                f.write("\n")
    model.eval()
    return model, heads, vocab, report
