"""Theory harness: common-feature content, SNR, exact selection oracles and controlled experiments."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregation import aggregate_dynamic, aggregate_fixed, aggregate_full, writeback
from .features import DegenerateError, FeatureBasis, build_basis, theory_similarity
from .model import PromptGroupSet
from .selection import (
    SelectionOutcome,
    group_similarity,
    sample_without_replacement,
    select_groups,
    selection_distribution,
    top_s,
)

ENUMERATION_LIMIT = 8
SNR_ZERO_NOISE = 1e-15


# --- common feature content -------------------------------------------------


def cfc(prompt, basis: FeatureBasis) -> float:
    prompt = np.asarray(prompt, dtype=float)
    if prompt.shape != (basis.dim,):
        raise ValueError(f"expected length {basis.dim}, got shape {prompt.shape}")
    return float(prompt @ basis.global_dir)


@dataclass
class CfcReport:
    c: np.ndarray
    probs: np.ndarray
    expected_cfc_pi: float
    expected_cfc_uniform: float
    gap: float
    expected_set_mean: float | None = None
    alpha_g: list = field(default_factory=list)


def theory_scores(c, s) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(c < 0) or np.any(s < 0):
        raise ValueError("coefficients must be nonnegative")
    if np.any((c == 0) & (s == 0)):
        raise DegenerateError("a group has c = s = 0")
    return np.array([theory_similarity(ci, si) for ci, si in zip(c, s)])


def expected_cfc(c, s, tau: float, distribution=selection_distribution) -> CfcReport:
    """Expected common content of one draw from the selection distribution vs a uniform draw.

    ``gap`` is evaluated as ``sum_g (c_g - mean c) * pi_g``, which is the
    exact difference without cancellation between two nearly equal means.
    """
    c = np.asarray(c, dtype=float)
    probs = np.asarray(distribution(theory_scores(c, s), tau), dtype=float)
    e_pi = float(c @ probs)
    e_unif = float(c.mean())
    gap = float((c - e_unif) @ probs)
    return CfcReport(c, probs, e_pi, e_unif, gap)


def ordered_sequence_law(probs, k: int):
    """Yield ``(sequence, probability)`` for every ordered draw of ``k`` distinct indices
    under sequential renormalized sampling."""
    p = np.asarray(probs, dtype=float)
    for seq in itertools.permutations(range(len(p)), k):
        prob = 1.0
        left = 1.0
        for i in seq:
            prob *= p[i] / left
            left -= p[i]
        yield seq, prob


def subset_probabilities(probs, k: int) -> dict[frozenset, float]:
    """Exact law of the selected *set* (enumeration oracle)."""
    if len(probs) > ENUMERATION_LIMIT:
        raise ValueError(f"enumeration limited to G <= {ENUMERATION_LIMIT}")
    out: dict[frozenset, float] = {}
    for seq, prob in ordered_sequence_law(probs, k):
        key = frozenset(seq)
        out[key] = out.get(key, 0.0) + prob
    return out


@dataclass
class SetMeanResult:
    set_mean: float
    expected_cfc_pi: float
    expected_cfc_uniform: float
    holds: bool  # set_mean >= E_pi, the direction claimed by the theory
    std_error: float = 0.0


def set_mean_expectation(
    c, s, tau: float, k: int, monte_carlo: bool = False, n_samples: int = 100_000, rng=None
) -> SetMeanResult:
    """Expected mean common content of ``k`` groups drawn without replacement.

    Exact enumeration for ``G <= 8``; larger ``G`` needs ``monte_carlo=True``
    and reports the standard error of the estimate.
    """
    c = np.asarray(c, dtype=float)
    G = len(c)
    if not 1 <= k <= G:
        raise ValueError(f"k must lie in [1, {G}]")
    rep = expected_cfc(c, s, tau)
    if G <= ENUMERATION_LIMIT:
        value = sum(prob * c[list(seq)].mean() for seq, prob in ordered_sequence_law(rep.probs, k))
        se = 0.0
    elif monte_carlo:
        rng = rng if rng is not None else np.random.default_rng(0)
        draws = np.array([c[sample_without_replacement(rep.probs, k, rng)].mean() for _ in range(n_samples)])
        value, se = float(draws.mean()), float(draws.std(ddof=1) / math.sqrt(n_samples))
    else:
        raise ValueError(f"G={G} exceeds the enumeration limit {ENUMERATION_LIMIT}; pass monte_carlo=True")
    return SetMeanResult(float(value), rep.expected_cfc_pi, rep.expected_cfc_uniform, value >= rep.expected_cfc_pi, se)


# --- signal-to-noise ratio ----------------------------------------------------


@dataclass
class SnrReport:
    slots: np.ndarray  # indices of the slots that were evaluated
    beta: np.ndarray
    client_noise: np.ndarray
    task_noise: np.ndarray  # noise directions plus residual energy
    noise: np.ndarray
    snr: np.ndarray  # +inf where the noise power vanishes (see ``pure_signal``)
    pure_signal: np.ndarray
    min_snr: float
    selection_advantage: np.ndarray | None = None


def slot_snr(slots, basis: FeatureBasis, exclude_zero: bool = True) -> SnrReport:
    """SNR of aggregated slots: squared global coefficient over everything else.

    Noise power counts the client subspace, the noise directions and any
    residual outside the modeled subspaces. Strategy quality is the minimum
    over nonzero slots.
    """
    slots = np.atleast_2d(np.asarray(slots, dtype=float))
    idx = np.flatnonzero(np.any(slots != 0, axis=1)) if exclude_zero else np.arange(len(slots))
    if len(idx) == 0:
        raise ValueError("all slots are zero; SNR undefined")
    V = slots[idx]
    beta = V @ basis.global_dir
    client_proj = V @ basis.client_frame.T
    noise_proj = V @ basis.noise_dirs.T
    residual = V - beta[:, None] * basis.global_dir - client_proj @ basis.client_frame - noise_proj @ basis.noise_dirs
    client_noise = np.sum(client_proj**2, axis=1)
    task_noise = np.sum(noise_proj**2, axis=1) + np.sum(residual**2, axis=1)
    noise = client_noise + task_noise
    pure = noise < SNR_ZERO_NOISE
    with np.errstate(divide="ignore"):
        snr = np.where(pure, np.inf, beta**2 / np.where(pure, 1.0, noise))
    return SnrReport(idx, beta, client_noise, task_noise, noise, snr, pure, float(snr.min()))


@dataclass
class SnrInstance:
    snr_full: float
    snr_fixed: float
    snr_dynamic: float
    selections: list
    selection_advantage: np.ndarray


def snr_instance(
    rng: np.random.Generator,
    n_clients: int = 10,
    G: int = 5,
    s: int = 2,
    n_noise: int = 8,
    rho: float = 0.0,
    global_beta=(0.8, 1.2),
    global_gamma=(0.0, 0.3),
    local_beta=(0.0, 0.2),
    local_gamma=(1.0, 2.0),
    noise_std: float = 0.1,
    prev_noise: float = 0.05,
) -> tuple[FeatureBasis, np.ndarray, np.ndarray]:
    """Random prompt population ``beta*u + gamma*mu_c + sum_l phi_l xi_l`` with heterogeneous roles.

    Every client holds ``s`` globally aligned groups (large beta, small gamma)
    at client-specific random positions and ``G - s`` client-specific groups
    (small beta, large gamma). Returns ``(basis, prompts[n, G, d], prev_global[G, d])``
    where the previous global slots are ``u`` plus a small perturbation.
    """
    d = 2 + n_clients + n_noise
    basis = build_basis(d, n_clients, n_noise, rho, rng)
    P = np.zeros((n_clients, G, d))
    for c in range(n_clients):
        aligned = set(rng.choice(G, size=s, replace=False).tolist())
        for j in range(G):
            lo_b, hi_b = global_beta if j in aligned else local_beta
            lo_g, hi_g = global_gamma if j in aligned else local_gamma
            beta = rng.uniform(lo_b, hi_b)
            gamma = rng.uniform(lo_g, hi_g)
            phi = noise_std * rng.standard_normal(n_noise)
            P[c, j] = beta * basis.global_dir + gamma * basis.client_dirs[c] + phi @ basis.noise_dirs
    prev = basis.global_dir[None, :] + prev_noise * rng.standard_normal((G, d))
    return basis, P, prev


def strategy_snrs(basis: FeatureBasis, P: np.ndarray, prev: np.ndarray, s: int, tau: float = 1.0) -> SnrInstance:
    """Min-slot SNR of full, fixed-prefix and dynamic (slotwise top-s, indicator-average) aggregation."""
    n, G, d = P.shape
    counts = np.ones(n)
    # the theory works on one modality; mirror it into both slots of a prompt set
    sets = [PromptGroupSet(P[c], P[c]) for c in range(n)]
    full = aggregate_full(sets, counts)
    fixed = aggregate_fixed(sets, counts, s)
    selections = []
    for c in range(n):
        scores = group_similarity(P[c], prev, "slotwise").per_group
        probs = selection_distribution(scores, tau)
        chosen = tuple(top_s(probs, s))
        out = SelectionOutcome("text", probs, chosen, "top_s", scores)
        selections.append({"text": out, "visual": SelectionOutcome("visual", probs, chosen, "top_s", scores)})
    dyn = aggregate_dynamic(selections, sets, counts, mode="slotwise_literal")

    beta = P @ basis.global_dir  # (n, G)
    mask = np.zeros((n, G))
    for c, sel in enumerate(selections):
        mask[c, list(sel["text"].selected)] = 1
    with np.errstate(invalid="ignore", divide="ignore"):
        sel_mean = (beta * mask).sum(0) / mask.sum(0)
    advantage = sel_mean / beta.mean(0)
    return SnrInstance(
        slot_snr(full.text_slots, basis).min_snr,
        slot_snr(fixed.text_slots, basis).min_snr,
        slot_snr(dyn.text_slots, basis).min_snr,
        selections,
        advantage,
    )


# --- noise suppression ---------------------------------------------------------


@dataclass
class NoiseScaling:
    products: np.ndarray
    noise_power: np.ndarray
    slope: float
    intercept: float


def random_complement_directions(u: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` unit vectors uniformly distributed on the sphere orthogonal to ``u``."""
    g = rng.standard_normal((m, len(u)))
    g -= np.outer(g @ u, u)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def aggregated_specific_power(n: int, k: int, dim: int, c: float, s: float, reps: int, rng) -> float:
    u = np.zeros(dim)
    u[0] = 1.0
    total = 0.0
    for _ in range(reps):
        prompts = c * u + s * random_complement_directions(u, n * k, rng)
        agg = prompts.mean(axis=0)
        specific = agg - (agg @ u) * u
        total += specific @ specific
    return total / reps


def noise_scaling_experiment(grid, repetitions: int, rng, dim: int = 64, c: float = 1.0, s: float = 1.0) -> NoiseScaling:
    """Mean squared norm of the aggregated specific component vs ``n * k`` and its log-log slope."""
    grid = [(int(n), int(k)) for n, k in grid]
    products = np.array([n * k for n, k in grid], dtype=float)
    if len(set(products)) < 3:
        raise ValueError("noise-scaling grid needs at least 3 distinct n*k products")
    power = np.array([aggregated_specific_power(n, k, dim, c, s, repetitions, rng) for n, k in grid])
    slope, intercept = np.polyfit(np.log(products), np.log(power), 1)
    return NoiseScaling(products, power, float(slope), float(intercept))


# --- common coefficient trajectory under pure aggregation ------------------------


def pure_aggregation_alpha(
    rng: np.random.Generator,
    n_clients: int = 10,
    G: int = 5,
    s: int = 2,
    rounds: int = 10,
    dim: int = 32,
    specific: float = 1.0,
    policy: str = "top_s",
    tau: float = 1.0,
) -> list[float]:
    """Common coefficient of the aggregated prompt per round with no local training.

    Prompts start as ``c*u + specific*w`` (``c >= 0``, ``w`` random unit vectors
    orthogonal to ``u``, equal specific strength), are selected against the
    previous global slots, averaged in ordinal mode and written back.
    """
    u = np.zeros(dim)
    u[0] = 1.0
    clients = []
    for _ in range(n_clients):
        c = rng.uniform(0.0, 2.0, size=G)
        w = random_complement_directions(u, G, rng)
        p = c[:, None] * u + specific * w
        clients.append(PromptGroupSet(p, p.copy()))
    state = aggregate_full(clients, np.ones(n_clients))
    alphas = []
    for t in range(1, rounds + 1):
        sels = []
        for cl in clients:
            sels.append(select_groups(
                {"text": cl.text, "visual": cl.visual},
                {"text": state.text_slots, "visual": state.visual_slots},
                policy, s, tau, t, rng,
            ))
        state = aggregate_dynamic(sels, clients, np.ones(n_clients), "ordinal", state, t)
        alphas.append(float(np.mean(state.text_slots @ u)))
        clients = [writeback(cl, state, sel) for cl, sel in zip(clients, sels)]
    return alphas


# --- reporting helpers -------------------------------------------------------------


def selection_frequency_table(records, n_groups: int) -> dict:
    """Per-round per-modality selection counts from round records.

    Returns ``{"counts": {modality: array (rounds, G)}, "fractions": ..., "never_selected": [(modality, j)]}``.
    """
    records = list(records)
    if not records:
        raise ValueError("no rounds to tabulate")
    counts = {m: np.zeros((len(records), n_groups), dtype=int) for m in ("text", "visual")}
    participants = np.zeros(len(records))
    for r, rec in enumerate(records):
        participants[r] = len(rec.participants)
        for sel in rec.selections.values():
            for m in ("text", "visual"):
                for j in sel[m].selected:
                    counts[m][r, j] += 1
    fractions = {m: counts[m] / participants[:, None] for m in counts}
    never = [(m, j) for m in counts for j in range(n_groups) if counts[m][:, j].sum() == 0]
    return {"counts": counts, "fractions": fractions, "never_selected": never}


def similarity_matrix(items) -> np.ndarray:
    items = np.atleast_2d(np.asarray(items, dtype=float))
    if len(items) < 2:
        raise ValueError("need at least two items")
    norms = np.linalg.norm(items, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateError("cosine undefined for a zero item")
    unit = items / norms
    M = unit @ unit.T
    M = (M + M.T) / 2
    np.fill_diagonal(M, 1.0)
    return M


def similarity_matrices(client_prompts: list[PromptGroupSet], scope: str = "intra_client") -> dict:
    """Cosine matrices per modality.

    ``intra_client``: one G x G matrix per client. ``inter_client``: one
    N x N matrix per group index.
    """
    out = {}
    for m in ("text", "visual"):
        if scope == "intra_client":
            out[m] = [similarity_matrix(p.modality(m)) for p in client_prompts]
        elif scope == "inter_client":
            G = client_prompts[0].n_groups
            out[m] = [similarity_matrix([p.modality(m)[j] for p in client_prompts]) for j in range(G)]
        else:
            raise ValueError(f"unknown scope {scope!r}")
    return out


def mean_off_diagonal(M: np.ndarray) -> float:
    n = len(M)
    return float((M.sum() - np.trace(M)) / (n * (n - 1)))


def comm_cost(strategy: str, G: int, s: int, d_pt: int, d_pv: int, aggregation: str = "ordinal") -> dict:
    """Scalars exchanged per participating client per round.

    ``uplink`` counts prompt scalars only; selected-index metadata (needed by
    the slotwise modes) is reported separately.
    """
    per_group = d_pt + d_pv
    if strategy == "full":
        up_groups, slots, meta = G, G, 0
    elif strategy == "fixed":
        up_groups, slots, meta = s, s, 0
    elif strategy == "dynamic":
        up_groups = s
        slots = s if aggregation == "ordinal" else G
        meta = 0 if aggregation == "ordinal" else 2 * s
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return {"uplink": up_groups * per_group, "uplink_metadata": meta, "downlink": slots * per_group}
