"""Server-side aggregation of prompt groups (full, fixed-prefix, dynamic) and client write-back."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import PromptGroupSet
from .selection import MODALITIES, SelectionOutcome

STRATEGIES = ("full", "fixed", "dynamic")
DYNAMIC_MODES = ("ordinal", "slotwise_literal", "slotwise_renormalized")


@dataclass
class GlobalPromptState:
    round: int
    text_slots: np.ndarray  # (S, d_pt)
    visual_slots: np.ndarray  # (S, d_pv)
    strategy: str
    mode: str  # "indexed" (slot j <-> group j), or one of DYNAMIC_MODES
    slot_weights: dict = field(default_factory=dict)

    def slots(self, modality: str) -> np.ndarray:
        return self.text_slots if modality == "text" else self.visual_slots

    @property
    def n_slots(self) -> int:
        return len(self.text_slots)

    @property
    def slot_to_group(self) -> bool:
        """True when slot ``j`` corresponds to local group ``j``."""
        return self.mode != "ordinal"

    def nonzero_slots(self, modality: str) -> np.ndarray:
        return np.flatnonzero(np.any(self.slots(modality) != 0, axis=1))

    def copy(self) -> "GlobalPromptState":
        return GlobalPromptState(
            self.round, self.text_slots.copy(), self.visual_slots.copy(), self.strategy, self.mode,
            {k: np.array(v) for k, v in self.slot_weights.items()},
        )


def normalized_weights(counts) -> np.ndarray:
    n = np.asarray(counts, dtype=float)
    if n.ndim != 1 or len(n) == 0:
        raise ValueError("need at least one client")
    if np.any(n < 0) or n.sum() <= 0:
        raise ValueError("sample counts must be nonnegative with a positive total")
    return n / n.sum()


def weighted_sum(stacks: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """``sum_c weights[c] * stacks[c]`` accumulated in client order.

    Every aggregation path goes through here so that equivalent strategies
    produce bit-identical results.
    """
    acc = weights[0] * stacks[0]
    for w, a in zip(weights[1:], stacks[1:]):
        acc = acc + w * a
    return acc


def _check_shapes(prompt_sets: list[PromptGroupSet]):
    if not prompt_sets:
        raise ValueError("no client prompts to aggregate")
    t0, v0 = prompt_sets[0].text.shape, prompt_sets[0].visual.shape
    for p in prompt_sets[1:]:
        if p.text.shape != t0 or p.visual.shape != v0:
            raise ValueError("clients hold prompt sets of different shapes")


def aggregate_full(prompt_sets: list[PromptGroupSet], counts, round_idx: int = 0) -> GlobalPromptState:
    _check_shapes(prompt_sets)
    w = normalized_weights(counts)
    if len(w) != len(prompt_sets):
        raise ValueError("one weight per client required")
    text = weighted_sum([p.text for p in prompt_sets], w)
    vis = weighted_sum([p.visual for p in prompt_sets], w)
    full_w = np.ones(len(text))
    return GlobalPromptState(round_idx, text, vis, "full", "indexed", {"text": full_w, "visual": full_w.copy()})


def aggregate_fixed(prompt_sets: list[PromptGroupSet], counts, s: int, round_idx: int = 0) -> GlobalPromptState:
    """Aggregate the first ``s`` groups as in :func:`aggregate_full`; the remaining slots are zero."""
    _check_shapes(prompt_sets)
    G = prompt_sets[0].n_groups
    if not 1 <= s <= G:
        raise ValueError(f"s must lie in [1, {G}], got {s}")
    w = normalized_weights(counts)
    if len(w) != len(prompt_sets):
        raise ValueError("one weight per client required")
    text = np.zeros_like(prompt_sets[0].text)
    vis = np.zeros_like(prompt_sets[0].visual)
    text[:s] = weighted_sum([p.text[:s] for p in prompt_sets], w)
    vis[:s] = weighted_sum([p.visual[:s] for p in prompt_sets], w)
    sw = np.r_[np.ones(s), np.zeros(G - s)]
    return GlobalPromptState(round_idx, text, vis, "fixed", "indexed", {"text": sw, "visual": sw.copy()})


def aggregate_dynamic(
    selections: list[dict[str, SelectionOutcome]],
    prompt_sets: list[PromptGroupSet],
    counts,
    mode: str = "ordinal",
    previous: GlobalPromptState | None = None,
    round_idx: int = 0,
) -> GlobalPromptState:
    """Aggregate only the groups each client selected.

    ``ordinal``: slot ``i`` averages every client's ``i``-th ranked selection
    (``s`` slots). ``slotwise_literal``: slot ``j`` is the weighted sum of the
    clients that selected group ``j``, unselected contributions counting as
    zero (``G`` slots). ``slotwise_renormalized``: same, divided by the
    selecting clients' total weight; slots nobody selected carry over from
    ``previous``.
    """
    _check_shapes(prompt_sets)
    if mode not in DYNAMIC_MODES:
        raise ValueError(f"unknown dynamic aggregation mode {mode!r}")
    if len(selections) != len(prompt_sets):
        raise ValueError("one selection per client required")
    w = normalized_weights(counts)
    if len(w) != len(prompt_sets):
        raise ValueError("one weight per client required")
    G = prompt_sets[0].n_groups
    out = {}
    slot_weights = {}
    for m in MODALITIES:
        sizes = {len(sel[m].selected) for sel in selections}
        if len(sizes) != 1 or 0 in sizes:
            raise ValueError(f"inconsistent selection sizes for {m}: {sorted(sizes)}")
        local = [p.modality(m) for p in prompt_sets]
        if mode == "ordinal":
            stacks = [loc[list(sel[m].ranked)] for loc, sel in zip(local, selections)]
            out[m] = weighted_sum(stacks, w)
            slot_weights[m] = np.ones(len(out[m]))
            continue
        mask = np.zeros((len(local), G))
        for c, sel in enumerate(selections):
            mask[c, list(sel[m].selected)] = 1.0
        stacks = [loc * mask[c][:, None] for c, loc in enumerate(local)]
        slots = weighted_sum(stacks, w)
        sel_weight = mask.T @ w
        if mode == "slotwise_renormalized":
            keep = sel_weight > 0
            slots[keep] /= sel_weight[keep][:, None]
            if np.any(~keep):
                if previous is None or previous.n_slots != G:
                    raise ValueError("carrying empty slots forward needs a previous state with one slot per group")
                slots[~keep] = previous.slots(m)[~keep]
        out[m] = slots
        slot_weights[m] = sel_weight
    return GlobalPromptState(round_idx, out["text"], out["visual"], "dynamic", mode, slot_weights)


def indexed_selection(modality_groups: dict[str, list[int]], policy: str) -> dict[str, SelectionOutcome]:
    """Selection outcome for strategies whose group set is fixed in advance (full: all, fixed: prefix)."""
    out = {}
    for m, groups in modality_groups.items():
        probs = np.zeros(max(groups) + 1)
        out[m] = SelectionOutcome(m, probs, tuple(groups), policy)
    return out


def writeback(prompts: PromptGroupSet, state: GlobalPromptState, selection: dict[str, SelectionOutcome]) -> PromptGroupSet:
    """Overwrite the client's selected groups with the matching global slots; other groups are untouched."""
    out = prompts.copy()
    for m in MODALITIES:
        sel = selection[m]
        if len(sel.selected) == 0:
            raise ValueError("empty selection cannot be written back")
        slots = state.slots(m)
        target = out.modality(m)
        if state.slot_to_group:
            if len(slots) != prompts.n_groups:
                raise ValueError(f"{len(slots)} global slots cannot map onto {prompts.n_groups} groups")
            for j in sel.selected:
                target[j] = slots[j]
        else:
            ranked = sel.ranked
            if len(ranked) != len(slots):
                raise ValueError(f"selection of {len(ranked)} groups does not match {len(slots)} global slots")
            for i, j in enumerate(ranked):
                target[j] = slots[i]
    return out
