"""Similarity scoring, softmax selection distribution and sequential sampling of prompt groups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import DegenerateError

MODALITIES = ("text", "visual")
POLICIES = ("probabilistic", "top_s", "random", "all")
PAIRING_MODES = ("set_sum", "slotwise")


@dataclass(frozen=True)
class SelectionScores:
    modality: str
    per_group: np.ndarray
    pairing_mode: str


@dataclass(frozen=True)
class SelectionOutcome:
    modality: str
    probs: np.ndarray
    selected: tuple[int, ...]  # draw order
    policy: str
    scores: np.ndarray | None = None

    @property
    def ranked(self) -> tuple[int, ...]:
        """Selected groups by descending similarity score (draw order breaks ties).

        Random and all-groups selections carry no meaningful score ordering and
        keep their draw / index order.
        """
        if self.scores is None or self.policy in ("random", "all"):
            return self.selected
        return tuple(sorted(self.selected, key=lambda j: -self.scores[j]))


def _unit_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateError("cosine similarity undefined for a zero prompt vector")
    return M / norms


def group_similarity(local, global_slots, pairing_mode: str = "set_sum", modality: str = "text") -> SelectionScores:
    """Score every local group against the global prompts.

    ``set_sum`` sums cosines to all global slots; ``slotwise`` compares group
    ``j`` only with slot ``j`` (needs one slot per group).
    """
    local = np.atleast_2d(np.asarray(local, dtype=float))
    slots = np.atleast_2d(np.asarray(global_slots, dtype=float))
    if slots.size == 0:
        raise ValueError("no global slots to compare against")
    if local.shape[1] != slots.shape[1]:
        raise ValueError(f"dimension mismatch: local {local.shape[1]} vs global {slots.shape[1]}")
    L, S = _unit_rows(local), _unit_rows(slots)
    if pairing_mode == "set_sum":
        scores = (L @ S.T).sum(axis=1)
    elif pairing_mode == "slotwise":
        if len(slots) != len(local):
            raise ValueError(f"slotwise pairing needs {len(local)} global slots, got {len(slots)}")
        scores = np.sum(L * S, axis=1)
    else:
        raise ValueError(f"unknown pairing mode {pairing_mode!r}")
    return SelectionScores(modality, scores, pairing_mode)


def selection_distribution(scores, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(getattr(scores, "per_group", scores), dtype=float) / tau
    e = np.exp(s - s.max())
    return e / e.sum()


def sample_without_replacement(probs, s: int, rng: np.random.Generator) -> list[int]:
    """Draw ``s`` distinct indices one at a time, renormalizing over the remaining ones."""
    p = np.array(probs, dtype=float)
    G = len(p)
    if not 1 <= s <= G:
        raise ValueError(f"cannot draw {s} of {G} groups")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError("probs must be a probability vector")
    remaining = list(range(G))
    out = []
    for _ in range(s):
        w = p[remaining]
        total = w.sum()
        u = rng.random()
        if total <= 0:
            # all remaining mass exhausted (degenerate input): fall back to uniform
            pick = int(u * len(remaining))
        else:
            pick = int(np.searchsorted(np.cumsum(w), u * total, side="right"))
            if pick >= len(remaining):  # rounding at the top end
                pick = int(np.flatnonzero(w)[-1])
        out.append(remaining.pop(pick))
    return out


def sample_without_replacement_batch(probs, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent draws of :func:`sample_without_replacement` as an ``(n, s)`` array.

    Uniforms are consumed in the same order as ``n`` sequential calls, so for
    small ``G`` both paths return identical draws from identical streams.
    """
    p = np.array(probs, dtype=float)
    G = len(p)
    if not 1 <= s <= G:
        raise ValueError(f"cannot draw {s} of {G} groups")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError("probs must be a probability vector")
    u = rng.random((n, s))
    alive = np.ones((n, G), dtype=bool)
    out = np.empty((n, s), dtype=int)
    rows = np.arange(n)
    for step in range(s):
        w = np.where(alive, p[None, :], 0.0)
        total = w.sum(axis=1)
        csum = np.cumsum(w, axis=1)
        pick = np.sum(csum <= (u[:, step] * total)[:, None], axis=1)
        # top-end rounding: fall back to the last live index with positive weight
        over = pick >= G
        if np.any(over):
            last = G - 1 - np.argmax((w > 0)[:, ::-1], axis=1)
            pick[over] = last[over]
        empty = total <= 0
        if np.any(empty):
            live = np.cumsum(alive, axis=1)
            nth = (u[:, step] * alive.sum(axis=1)).astype(int)
            pick[empty] = np.argmax(live == (nth + 1)[:, None], axis=1)[empty]
        out[:, step] = pick
        alive[rows, pick] = False
    return out


def top_s(scores, s: int) -> list[int]:
    scores = np.asarray(scores, dtype=float)
    if not 1 <= s <= len(scores):
        raise ValueError(f"cannot take top {s} of {len(scores)}")
    return sorted(range(len(scores)), key=lambda j: (-scores[j], j))[:s]


def select_groups(
    local: dict,
    global_slots: dict,
    policy: str,
    s: int,
    tau: float,
    round_idx: int,
    rng: np.random.Generator,
    pairing_mode: str = "set_sum",
    coupled: bool = False,
) -> dict[str, SelectionOutcome]:
    """Choose ``s`` groups per modality.

    ``local`` and ``global_slots`` map modality name to ``(G, dim)`` / ``(S, dim)``
    arrays. Round 1 always selects uniformly at random. Modalities are selected
    independently unless ``coupled``, in which case one index set is drawn
    from the summed scores and shared.
    """
    if round_idx < 1:
        raise ValueError("rounds are numbered from 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    G = len(local["text"])
    if not 1 <= s <= G:
        raise ValueError(f"cannot select {s} of {G} groups")
    effective = "random" if round_idx == 1 and policy != "all" else policy

    scores = {}
    if effective != "random":
        for m in MODALITIES:
            scores[m] = group_similarity(local[m], global_slots[m], pairing_mode, m).per_group

    def choose(sc):
        if effective == "all":
            probs = selection_distribution(sc, tau) if sc is not None else np.full(G, 1.0 / G)
            return probs, list(range(G))
        if effective == "random":
            probs = np.full(G, 1.0 / G)
            return probs, sample_without_replacement(probs, s, rng)
        probs = selection_distribution(sc, tau)
        if effective == "top_s":
            return probs, top_s(sc, s)
        return probs, sample_without_replacement(probs, s, rng)

    out = {}
    if coupled:
        joint = scores["text"] + scores["visual"] if scores else None
        probs, sel = choose(joint)
        for m in MODALITIES:
            out[m] = SelectionOutcome(m, probs, tuple(sel), effective, joint)
    else:
        for m in MODALITIES:
            sc = scores.get(m)
            probs, sel = choose(sc)
            out[m] = SelectionOutcome(m, probs, tuple(sel), effective, sc)
    return out
