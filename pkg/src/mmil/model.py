"""Hierarchical MIL transformer with messenger (MSG) tokens.

One *basic layer* runs, for every level ``l`` of the hierarchy:

1. gather the level-``l`` tokens into their (unmasked) sub-bags,
2. prepend the sub-bag's MSG slot(s) and run one transformer block inside
   each sub-bag (attention never crosses sub-bag boundaries),
3. part the MSG rows from the instance rows,
4. run a merge block over all MSG rows jointly; its outputs are the
   tokens of level ``l + 1``.  The CLS token joins the top-level merge.

Afterwards every level-``l + 1`` token is reattached to the sub-bag it came
from, replacing that sub-bag's MSG slot for the next layer.  Partitions are
computed once per bag and reused across layers.

Sub-bags are processed as one padded ``(sub_bags, tokens, C)`` batch with a
key mask, which is numerically identical to handling them one by one.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DataError, DimensionError, ParseError
from .grouping import GROUPING_OPERATORS, Partition, apply_mask, group, kmeans

BLOCK_STYLES = ("bare", "prenorm_ffn")
REATTACH_MODES = ("replace", "concat")


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 4
    layers: int = 2
    levels: int = 1
    sub_bags: tuple[int, ...] = (4,)
    msg_per_subbag: int = 1
    mask_ratios: tuple[float, ...] = (0.0,)
    grouping: str = "random"
    ffn_hidden: int | None = None
    block_style: str = "prenorm_ffn"
    input_dim: int | None = None
    reattach: str = "replace"
    remask_per_layer: bool = False

    def __post_init__(self):
        self.sub_bags = tuple(int(g) for g in self.sub_bags)
        self.mask_ratios = tuple(float(r) for r in self.mask_ratios)
        if len(self.sub_bags) == 1 and self.levels > 1:
            self.sub_bags = self.sub_bags * self.levels
        if len(self.mask_ratios) < self.levels:
            self.mask_ratios = self.mask_ratios + (0.0,) * (self.levels - len(self.mask_ratios))
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.dim
        if self.input_dim is None:
            self.input_dim = self.dim
        self.validate()

    def validate(self) -> None:
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"channel width {self.dim} must be divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigurationError("need at least one basic layer")
        if self.levels < 1:
            raise ConfigurationError("need at least one level")
        if len(self.sub_bags) != self.levels or min(self.sub_bags) < 1:
            raise ConfigurationError(f"need one sub-bag count >= 1 per level, got {self.sub_bags}")
        if len(self.mask_ratios) != self.levels:
            raise ConfigurationError(f"need one mask ratio per level, got {self.mask_ratios}")
        if any(not 0.0 <= r < 1.0 for r in self.mask_ratios):
            raise ConfigurationError(f"mask ratios must lie in [0, 1): {self.mask_ratios}")
        if self.msg_per_subbag < 1:
            raise ConfigurationError("need at least one MSG token per sub-bag")
        if self.grouping not in GROUPING_OPERATORS:
            raise ConfigurationError(
                f"unknown grouping operator {self.grouping!r}; choose one of {', '.join(GROUPING_OPERATORS)}"
            )
        if self.block_style not in BLOCK_STYLES:
            raise ConfigurationError(f"block_style must be one of {BLOCK_STYLES}")
        if self.reattach not in REATTACH_MODES:
            raise ConfigurationError(f"reattach must be one of {REATTACH_MODES}")
        if self.reattach == "concat" and self.remask_per_layer:
            raise ConfigurationError("concat reattachment needs a fixed mask across layers")

    def to_json(self) -> dict:
        d = asdict(self)
        d["sub_bags"] = list(self.sub_bags)
        d["mask_ratios"] = list(self.mask_ratios)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "sub_bags": tuple(d["sub_bags"]), "mask_ratios": tuple(d["mask_ratios"])})


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    C, H = cfg.dim, cfg.ffn_hidden
    shapes = {"wq": (C, C), "wk": (C, C), "wv": (C, C), "wo": (C, C)}
    if cfg.block_style == "prenorm_ffn":
        shapes.update({
            "ln1.g": (C,), "ln1.b": (C,), "ln2.g": (C,), "ln2.b": (C,),
            "ffn.w1": (C, H), "ffn.b1": (H,), "ffn.w2": (H, C), "ffn.b2": (C,),
        })
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    C, m = cfg.dim, cfg.msg_per_subbag
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.input_dim != cfg.dim:
        shapes["embed.w"] = (cfg.input_dim, C)
        shapes["embed.b"] = (C,)
    for level in range(cfg.levels):
        shapes[f"msg.{level}"] = (m, C)
    shapes["cls"] = (1, C)
    for t in range(cfg.layers):
        for level in range(cfg.levels):
            for part in ("sub", "merge"):
                for k, s in _block_shapes(cfg).items():
                    shapes[f"layer{t}.level{level}.{part}.{k}"] = s
    if cfg.block_style == "prenorm_ffn":
        shapes["head.ln.g"] = (C,)
        shapes["head.ln.b"] = (C,)
    shapes.update({"head.w1": (C, C), "head.b1": (C,), "head.w2": (C, 2), "head.b2": (2,)})
    return shapes


def _init_value(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("msg.") or name == "cls":
        return rng.normal(0.0, 0.02, shape)
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)


class MmilModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        shapes = parameter_shapes(config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {k: Tensor(_init_value(k, s, rng), requires_grad=True, name=k) for k, s in shapes.items()}
        elif list(params) != list(shapes) or any(params[k].shape != s for k, s in shapes.items()):
            raise ConfigurationError("parameter set does not match the model configuration")
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def block(self, layer: int, level: int, part: str) -> dict[str, Tensor]:
        prefix = f"layer{layer}.level{level}.{part}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def clone(self) -> "MmilModel":
        return MmilModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def __call__(self, embeddings, plans) -> Tensor:
        return mmil_forward(embeddings, self, plans)


# ---------------------------------------------------------------------------
# blocks


def transformer_block(x: Tensor, p: dict[str, Tensor], heads: int, style: str,
                      key_mask: np.ndarray | None = None) -> Tensor:
    """``x + MSA(x)`` (bare) or the pre-norm MSA + FFN block, on ``(..., L, C)``."""
    if style == "bare":
        return x + ad.attention(x @ p["wq"], x @ p["wk"], x @ p["wv"], heads, key_mask) @ p["wo"]
    h = ad.layer_norm(x, p["ln1.g"], p["ln1.b"])
    x = x + ad.attention(h @ p["wq"], h @ p["wk"], h @ p["wv"], heads, key_mask) @ p["wo"]
    h = ad.layer_norm(x, p["ln2.g"], p["ln2.b"])
    return x + (ad.gelu(h @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"])


def attach_msg(subbag: Tensor, msg: Tensor) -> Tensor:
    """MSG rows first, then the sub-bag's instance rows."""
    if subbag.shape[-1] != msg.shape[-1]:
        raise DimensionError(f"MSG width {msg.shape[-1]} does not match sub-bag width {subbag.shape[-1]}")
    return ad.concat_tokens([msg, subbag])


def part_msg(bags: Sequence[Tensor], m: int) -> tuple[list[Tensor], list[Tensor]]:
    msgs, instances = [], []
    for b in bags:
        head, tail = ad.split_tokens(b, [m, b.shape[-2] - m])
        msgs.append(head)
        instances.append(tail)
    return msgs, instances


def _pad_index(sizes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    width = max(sizes)
    index = np.full((len(sizes), width), -1, dtype=np.int64)
    start = 0
    for j, s in enumerate(sizes):
        index[j, :s] = np.arange(start, start + s)
        start += s
    return index, index >= 0


def msa_within_subbags(bags: Sequence[Tensor], weights: dict[str, Tensor], heads: int,
                       style: str = "bare") -> list[Tensor]:
    """Apply one block independently inside each ``(w_j + m) x C`` sub-bag."""
    if not bags:
        return []
    sizes = [b.shape[0] for b in bags]
    if min(sizes) < 1:
        raise DataError("empty sub-bag reached attention")
    index, valid = _pad_index(sizes)
    flat = ad.concat(list(bags), axis=0)
    out = transformer_block(ad.gather_rows(flat, index), weights, heads, style, key_mask=valid)
    C = flat.shape[1]
    back = np.flatnonzero(valid.reshape(-1))
    rows = ad.gather_rows(ad.reshape(out, (-1, C)), back)
    return ad.split(rows, sizes, axis=0)


def merge_msg(all_msg: Tensor, weights: dict[str, Tensor], heads: int, style: str = "bare") -> Tensor:
    """One block over all MSG tokens jointly; ``t x C -> t x C``."""
    if all_msg.shape[0] < 1:
        raise DataError("merge needs at least one MSG token")
    t, C = all_msg.shape
    out = transformer_block(ad.reshape(all_msg, (1, t, C)), weights, heads, style)
    return ad.reshape(out, (t, C))


# ---------------------------------------------------------------------------
# per-bag plans


@dataclass
class LevelPlan:
    """Grouping of one level's tokens, restricted to unmasked sub-bags."""

    partition: Partition
    index: np.ndarray  # (active, width) token ids, -1 = padding
    valid: np.ndarray
    n_tokens: int

    @property
    def active(self) -> np.ndarray:
        return self.partition.active()


def _level_plan(p: Partition) -> LevelPlan:
    active = p.active()
    members = [p.members(j) for j in active]
    width = max(len(m) for m in members)
    index = np.full((len(active), width), -1, dtype=np.int64)
    for r, m in enumerate(members):
        index[r, : len(m)] = m
    return LevelPlan(p, index, index >= 0, p.n)


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints/strings (independent of PYTHONHASHSEED)."""
    words = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence([w & 0xFFFFFFFF for w in words]).generate_state(1)[0])


def base_partition(cfg: ModelConfig, embeddings: np.ndarray, coords=None, seed: int = 0,
                   bag_id: str = "") -> Partition:
    """Unmasked level-0 partition of one bag; computed once and cached by callers."""
    n = embeddings.shape[0]
    if n < cfg.sub_bags[0]:
        raise DataError(f"bag {bag_id!r} has {n} instances, fewer than {cfg.sub_bags[0]} sub-bags")
    return group(cfg.grouping, cfg.sub_bags[0], n=n, embeddings=embeddings, coords=coords,
                 seed=derive_seed(seed, "group", bag_id))


def plan_bag(cfg: ModelConfig, base: Partition, embeddings: np.ndarray, coords=None,
             mask_seed: int = 0, masking: bool = True, group_seed: int = 0) -> list[list[LevelPlan]]:
    """Per-layer, per-level plans for one forward pass.

    Upper levels are grouped from per-token descriptors inherited from the
    source sub-bag (mean coordinate / mean input embedding), so their
    partitions never depend on learned state.
    """
    m = cfg.msg_per_subbag
    layer_plans: list[list[LevelPlan]] = []
    cache: dict[int, list[LevelPlan]] = {}
    for t in range(cfg.layers):
        key = t if cfg.remask_per_layer else 0
        if key not in cache:
            levels: list[LevelPlan] = []
            p = base
            feats = np.asarray(embeddings, dtype=np.float64)
            pos = None if coords is None else np.asarray(coords, dtype=np.float64)
            for level in range(cfg.levels):
                ratio = cfg.mask_ratios[level] if masking else 0.0
                p = apply_mask(p, ratio, derive_seed(mask_seed, "mask", t if cfg.remask_per_layer else 0, level))
                plan = _level_plan(p)
                levels.append(plan)
                if level + 1 == cfg.levels:
                    break
                src = plan.active
                feats = np.repeat(np.stack([feats[p.members(j)].mean(0) for j in src]), m, axis=0)
                if pos is not None:
                    pos = np.repeat(np.stack([pos[p.members(j)].mean(0) for j in src]), m, axis=0)
                n_next, g_next = feats.shape[0], cfg.sub_bags[level + 1]
                if n_next < g_next:
                    raise ConfigurationError(
                        f"level {level + 1} has {n_next} tokens, fewer than {g_next} sub-bags"
                    )
                p = _upper_partition(cfg.grouping, g_next, feats, pos, derive_seed(group_seed, "upper", level + 1))
            cache[key] = levels
        layer_plans.append(cache[key])
    return layer_plans


def _upper_partition(op: str, g: int, feats: np.ndarray, pos, seed: int) -> Partition:
    if op == "coordinate":
        return kmeans(pos, g, seed=seed, metric="euclidean")
    if op == "embedding":
        return kmeans(feats, g, seed=seed, metric="cosine")
    return group(op, g, n=feats.shape[0], seed=seed)


# ---------------------------------------------------------------------------
# forward


@dataclass
class LayerState:
    x0: Tensor
    msg: list[Tensor]  # per level, (g_l, m, C); full sub-bag set
    extra: list[Tensor | None]  # concat mode: reattached rows per active sub-bag
    cls: Tensor


@dataclass
class LevelBags:
    """Output of one pass of hierarchical bag construction.

    ``tokens[l]`` is the level-``l`` bag after its within-sub-bag block
    (``tokens[k]`` is the top bag with CLS as its last row).  ``sources[l]``
    maps each level-``l + 1`` token to ``(sub-bag, slot)`` at level ``l``.
    """

    tokens: list[Tensor]
    partitions: list[Partition]
    sources: list[np.ndarray]
    parted_msg: list[Tensor] = field(default_factory=list)
    parted_extra: list[Tensor | None] = field(default_factory=list)
    cls: Tensor | None = None


def embed(model: MmilModel, embeddings) -> Tensor:
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if x.data.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DimensionError(f"bag embeddings {x.shape} do not match input width {model.config.input_dim}")
    if "embed.w" in model.params:
        x = x @ model.params["embed.w"] + model.params["embed.b"]
    return x


def initial_state(model: MmilModel, x0: Tensor) -> LayerState:
    cfg = model.config
    msg = []
    for level, g in enumerate(cfg.sub_bags):
        e = model.params[f"msg.{level}"]
        msg.append(ad.gather_rows(ad.reshape(e, (1, *e.shape)), np.zeros(g, dtype=np.int64)))
    return LayerState(x0, msg, [None] * cfg.levels, model.params["cls"])


def build_k_level_bags(model: MmilModel, layer: int, plans: Sequence[LevelPlan], state: LayerState) -> LevelBags:
    cfg = model.config
    C, m, k = cfg.dim, cfg.msg_per_subbag, cfg.levels
    heads, style = cfg.heads, cfg.block_style
    tokens = state.x0
    out = LevelBags([], [], [])
    for level, plan in enumerate(plans):
        if tokens.shape[0] != plan.n_tokens:
            raise ConfigurationError(
                f"level {level} has {tokens.shape[0]} tokens but its plan expects {plan.n_tokens}"
            )
        active = plan.active
        a, width = plan.index.shape
        parts = [ad.gather_rows(state.msg[level], active)]
        e = 0
        if state.extra[level] is not None:
            parts.append(state.extra[level])
            e = state.extra[level].shape[1]
        parts.append(ad.gather_rows(tokens, plan.index))
        key_mask = np.concatenate([np.ones((a, m + e), dtype=bool), plan.valid], axis=1)
        y = transformer_block(ad.concat_tokens(parts), model.block(layer, level, "sub"), heads, style, key_mask)
        pieces = ad.split_tokens(y, [m, e, width] if e else [m, width])
        new_msg, inst = pieces[0], pieces[-1]
        out.parted_msg.append(new_msg)
        out.parted_extra.append(pieces[1] if e else None)

        # level tokens after the block; tokens of masked sub-bags pass through
        n = plan.n_tokens
        where = np.arange(n)
        where[plan.index[plan.valid]] = n + np.flatnonzero(plan.valid.reshape(-1))
        updated = ad.gather_rows(ad.concat([tokens, ad.reshape(inst, (-1, C))], axis=0), where)
        out.tokens.append(updated)
        out.partitions.append(plan.partition)
        out.sources.append(np.stack([np.repeat(active, m), np.tile(np.arange(m), a)], axis=1))

        merge_in = ad.reshape(new_msg, (1, a * m, C))
        top = level + 1 == k
        if top:
            merge_in = ad.concat_tokens([merge_in, ad.reshape(state.cls, (1, 1, C))])
        merged = ad.reshape(
            transformer_block(merge_in, model.block(layer, level, "merge"), heads, style), (-1, C)
        )
        if top:
            out.tokens.append(merged)
            out.cls = ad.slice_axis(merged, a * m, a * m + 1, axis=0)
        tokens = merged
    return out


def reattach(model: MmilModel, levels: LevelBags, state: LayerState) -> LayerState:
    """Return each level-(l+1) token to the MSG slot of its source sub-bag."""
    cfg = model.config
    m, C, k = cfg.msg_per_subbag, cfg.dim, cfg.levels
    msg, extra = list(state.msg), list(state.extra)
    for level in range(k):
        active = levels.partitions[level].active()
        a = active.size
        upper = levels.tokens[level + 1]
        if level + 1 == k:
            upper = ad.slice_axis(upper, 0, a * m, axis=0)
        returned = ad.reshape(upper, (a, m, C))
        if cfg.reattach == "replace":
            g = msg[level].shape[0]
            where = np.arange(g)
            where[active] = g + np.arange(a)
            msg[level] = ad.gather_rows(ad.concat([msg[level], returned], axis=0), where)
        else:
            prev = levels.parted_extra[level]
            extra[level] = returned if prev is None else ad.concat_tokens([returned, prev])
    return LayerState(levels.tokens[0], msg, extra, levels.cls)


def mmil_forward(embeddings, model: MmilModel, plans: Sequence[Sequence[LevelPlan]]) -> Tensor:
    """Bag logits (shape ``(2,)``); ``plans`` comes from :func:`plan_bag`."""
    cfg = model.config
    if len(plans) != cfg.layers:
        raise ConfigurationError(f"got plans for {len(plans)} layers, model has {cfg.layers}")
    state = initial_state(model, embed(model, embeddings))
    for t in range(cfg.layers):
        levels = build_k_level_bags(model, t, plans[t], state)
        state = reattach(model, levels, state)
    p = model.params
    h = state.cls
    if "head.ln.g" in p:
        h = ad.layer_norm(h, p["head.ln.g"], p["head.ln.b"])
    logits = ad.gelu(h @ p["head.w1"] + p["head.b1"]) @ p["head.w2"] + p["head.b2"]
    return ad.reshape(logits, (2,))


def forward_bag(model: MmilModel, embeddings, coords=None, seed: int = 0, mask_seed: int = 0,
                masking: bool = True, bag_id: str = "") -> Tensor:
    """Convenience wrapper: partition, plan and run one bag."""
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    base = base_partition(model.config, emb, coords, seed=seed, bag_id=bag_id)
    plans = plan_bag(model.config, base, emb, coords, mask_seed=mask_seed, masking=masking,
                     group_seed=derive_seed(seed, bag_id))
    return mmil_forward(embeddings, model, plans)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MMILCKPT"
CKPT_VERSION = "mmil-ckpt-1"


def save_checkpoint(path, model: MmilModel, metadata: dict | None = None) -> None:
    """JSON header (config + manifest) followed by little-endian float64 data.

    Layout: magic ``MMILCKPT``, u32 header length, UTF-8 JSON header, then
    the parameter blob; manifest offsets are relative to the blob start.
    """
    manifest, offset = [], 0
    for name, t in model.params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size * 8
    header = json.dumps(
        {"version": CKPT_VERSION, "config": model.config.to_json(), "params": manifest,
         "metadata": metadata or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MmilModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ParseError("not an MMIL checkpoint (bad magic)", 0)
    if len(raw) < 12:
        raise ParseError("truncated checkpoint header", len(raw))
    (hlen,) = struct.unpack_from("<I", raw, 8)
    start = 12 + hlen
    if len(raw) < start:
        raise ParseError("truncated checkpoint header", len(raw))
    header = json.loads(raw[12:start].decode())
    if header.get("version") != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('version')!r}", 12)
    cfg = ModelConfig.from_json(header["config"])
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = start + entry["offset"]
        if lo + count * 8 > len(raw):
            raise ParseError(f"truncated parameter {entry['name']!r}", len(raw))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=lo).reshape(entry["shape"])
        params[entry["name"]] = Tensor(data.astype(np.float64), requires_grad=True, name=entry["name"])
    return MmilModel(cfg, params), header.get("metadata", {})
