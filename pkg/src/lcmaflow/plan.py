"""Factorization plans: which dims leave the flow at each scale.

Indices in a plan are flat positions in the *squeezed* layout of the scale,
i.e. ``(s/2, s/2, 4c)`` for a scale whose input is ``(s, s, c)``. Channels
``4k..4k+3`` of the squeezed layout are the 2x2 block of input channel ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .container import CorruptFileError, load_tensors, save_tensors
from .flow import FlowModel, LayoutError, LogDetMap, flow_forward, layout_size, scale_layouts, squeeze, unsqueeze

STRATEGIES = ("lcma", "static-realnvp", "random", "reverse-lcma")
PLAN_HEADER = "FFPLAN v1"


class PlanFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PlanEntry:
    scale: int
    layout: tuple[int, int, int]
    keep: tuple[int, ...]
    factor: tuple[int, ...]


@dataclass(frozen=True)
class FactorizationPlan:
    strategy: str
    entries: tuple[PlanEntry, ...]
    seed: int | None = None

    @property
    def scales(self) -> int:
        return len(self.entries)

    @property
    def input_layout(self) -> tuple[int, int, int]:
        return self.entries[0].layout


def rank_blocks(logdet_map, reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Split every 2x2 block of every channel into its two highest and two lowest entries.

    ``logdet_map`` has layout ``(s, s, c)``. Returns ``(keep, factor)`` as flat
    indices into the squeezed ``(s/2, s/2, 4c)`` layout, ordered by position,
    then input channel, then rank. Ties go to the earlier sub-pixel in raster
    order. With ``reverse=True`` the comparison is inverted so the two lowest
    entries are kept.
    """
    m = np.asarray(logdet_map, dtype=np.float64)
    if m.ndim != 3:
        raise ValueError(f"expected an (s, s, c) map, got shape {m.shape}")
    h, w, c = m.shape
    if h % 2 or w % 2:
        raise LayoutError(f"rank_blocks needs even spatial extents, got {h}x{w}")
    blocks = squeeze(m).reshape(h // 2, w // 2, c, 4)
    key = blocks if reverse else -blocks
    order = np.argsort(key, axis=-1, kind="stable")
    base = np.arange(h // 2 * w // 2 * c).reshape(h // 2, w // 2, c, 1) * 4
    ranked = base + order
    keep = ranked[..., :2].reshape(-1)
    factor = ranked[..., 2:].reshape(-1)
    return keep, factor


def _validate_entry(entry: PlanEntry) -> None:
    d = layout_size(entry.layout)
    both = np.concatenate([entry.keep, entry.factor]).astype(np.int64)
    if len(entry.keep) != len(entry.factor) or len(both) != d or len(np.unique(both)) != d \
            or both.min() < 0 or both.max() >= d:
        raise ValueError(f"scale {entry.scale}: keep/factor do not partition {d} dims in half")


def _make_plan(strategy, layout, splits, seed=None) -> FactorizationPlan:
    layouts = scale_layouts(tuple(layout), len(splits), multiscale=True)
    entries = []
    for k, (keep, factor) in enumerate(splits):
        entry = PlanEntry(k + 1, layouts[k], tuple(int(i) for i in keep), tuple(int(i) for i in factor))
        _validate_entry(entry)
        entries.append(entry)
    return FactorizationPlan(strategy, tuple(entries), seed)


def plan_from_maps(maps: Sequence[np.ndarray], map_ids: Sequence[np.ndarray], layout, reverse: bool = False,
                   strategy: str | None = None) -> FactorizationPlan:
    """Recursive block ranking over boundary log-det maps of a model without factor layers.

    ``maps[k]`` holds the averaged log-det per slot at boundary ``k`` and
    ``map_ids[k]`` the input-dimension id occupying each slot, so values can be
    looked up for whichever dims the multi-scale model still carries there.
    """
    layout = tuple(layout)
    layouts = scale_layouts(layout, len(maps), multiscale=True)
    ids = np.arange(layout_size(layout))
    splits = []
    for k, (m, mid) in enumerate(zip(maps, map_ids)):
        m = np.asarray(m, dtype=np.float64).reshape(-1)
        mid = np.asarray(mid, dtype=np.int64).reshape(-1)
        by_id = np.full(layout_size(layout), np.nan)
        by_id[mid] = m
        lay = layouts[k]
        sq_ids = squeeze(ids.reshape(lay)).reshape(-1)
        restricted = by_id[sq_ids]
        if np.any(np.isnan(restricted)):
            raise ValueError(f"boundary {k + 1} map does not cover every live dimension")
        h = lay[0] // 2
        unsq = unsqueeze(restricted.reshape(h, h, 4 * lay[2]))
        keep, factor = rank_blocks(unsq, reverse=reverse)
        splits.append((keep, factor))
        ids = sq_ids[keep]
    tag = strategy or ("reverse-lcma" if reverse else "lcma")
    return _make_plan(tag, layout, splits)


def boundary_maps(model: FlowModel, reference) -> list[LogDetMap]:
    """Batch-averaged live log-det maps at each boundary of ``model``."""
    out = flow_forward(model, reference)
    return [m.average() for m in out.boundary_maps]


def save_maps(maps: Sequence[np.ndarray], map_ids: Sequence[np.ndarray], path) -> None:
    """Store boundary maps as FFT1 records, each followed by its slot-to-input-dim ids."""
    records = []
    for m, mid in zip(maps, map_ids):
        m = np.asarray(m, dtype=np.float64)
        records += [m, np.asarray(mid, dtype=np.float64).reshape(m.shape)]
    save_tensors(path, records)


def load_maps(path) -> tuple[list[np.ndarray], list[np.ndarray]]:
    records = load_tensors(path)
    if not records or len(records) % 2:
        raise CorruptFileError(f"{path}: expected pairs of map and id records")
    maps, ids = records[0::2], records[1::2]
    for m, mid in zip(maps, ids):
        if m.shape != mid.shape or np.any(mid != np.round(mid)):
            raise CorruptFileError(f"{path}: id record does not match its map")
    return maps, [mid.astype(np.int64) for mid in ids]


def derive_plan_lcma(pretrained: FlowModel, reference, reverse: bool = False) -> FactorizationPlan:
    if pretrained.factor_layers:
        raise ValueError("LCMA planning needs a model without factor layers")
    if len(np.asarray(reference)) == 0:
        raise ValueError("reference batch is empty")
    maps = boundary_maps(pretrained, reference)
    ids, _ = pretrained.trace_ids()
    return plan_from_maps([m.live[0] for m in maps], ids, pretrained.input_layout, reverse=reverse)


def derive_plan_baseline(strategy: str, layout, scales: int, seed: int | None = None,
                         maps: Sequence[np.ndarray] | None = None,
                         map_ids: Sequence[np.ndarray] | None = None) -> FactorizationPlan:
    layout = tuple(layout)
    if strategy == "reverse-lcma":
        if maps is None or map_ids is None:
            raise ValueError("reverse-lcma needs the pretrained log-det maps")
        return plan_from_maps(maps[:scales], map_ids[:scales], layout, reverse=True)
    layouts = scale_layouts(layout, scales, multiscale=True)
    splits = []
    if strategy == "static-realnvp":
        for lay in layouts[:-1]:
            h = lay[0] // 2
            c4 = 4 * lay[2]
            idx = np.arange(h * h * c4).reshape(h * h, c4)
            splits.append((idx[:, : c4 // 2].reshape(-1), idx[:, c4 // 2:].reshape(-1)))
    elif strategy == "random":
        if seed is None:
            raise ValueError("random strategy needs a seed")
        rng = np.random.default_rng(seed)
        for lay in layouts[:-1]:
            d = layout_size(lay)
            perm = rng.permutation(d)
            splits.append((np.sort(perm[: d // 2]), np.sort(perm[d // 2:])))
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return _make_plan(strategy, layout, splits, seed if strategy == "random" else None)


# ---------------------------------------------------------------------------
# FFPLAN v1 text files


def format_plan(plan: FactorizationPlan) -> str:
    lines = [PLAN_HEADER, f"strategy={plan.strategy}", f"seed={'none' if plan.seed is None else plan.seed}"]
    for e in plan.entries:
        lay = "x".join(str(v) for v in e.layout)
        lines.append(f"scale={e.scale} layout={lay} keep={','.join(map(str, e.keep))} "
                     f"factor={','.join(map(str, e.factor))}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> FactorizationPlan:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != PLAN_HEADER:
        raise PlanFormatError(f"missing {PLAN_HEADER!r} header")
    strategy = None
    seed = None
    entries = []
    for ln in lines[1:]:
        if ln.startswith("strategy="):
            strategy = ln.split("=", 1)[1]
        elif ln.startswith("seed="):
            val = ln.split("=", 1)[1]
            seed = None if val == "none" else int(val)
        elif ln.startswith("scale="):
            fields = dict(tok.split("=", 1) for tok in ln.split())
            try:
                layout = tuple(int(v) for v in fields["layout"].split("x"))
                entry = PlanEntry(int(fields["scale"]), layout,
                                  tuple(int(v) for v in fields["keep"].split(",")),
                                  tuple(int(v) for v in fields["factor"].split(",")))
            except (KeyError, ValueError) as exc:
                raise PlanFormatError(f"bad scale line: {ln!r}") from exc
            _validate_entry(entry)
            entries.append(entry)
        else:
            raise PlanFormatError(f"unrecognised line: {ln!r}")
    if strategy not in STRATEGIES:
        raise PlanFormatError(f"unknown strategy {strategy!r}")
    if not entries:
        raise PlanFormatError("plan has no scales")
    entries.sort(key=lambda e: e.scale)
    if [e.scale for e in entries] != list(range(1, len(entries) + 1)):
        raise PlanFormatError("scale numbers must run 1..K")
    return FactorizationPlan(strategy, tuple(entries), seed)


def save_plan(plan: FactorizationPlan, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_plan(plan))


def load_plan(path) -> FactorizationPlan:
    with open(path) as fh:
        return parse_plan(fh.read())
