"""Self-contained numerical checks of the simulator and of the theory it instantiates.

Each ``check_*`` function builds its own instances, compares the production
code path against an independent oracle or a stated inequality, and returns a
:class:`CheckResult`. The ``verify`` command and the acceptance tests both call
these functions.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .features import build_basis, theory_similarity
from .federation import benchmark_config, run_federation
from .model import PromptGroupSet, build_encoders, init_prompts, loss_and_gradient
from .selection import sample_without_replacement, sample_without_replacement_batch, selection_distribution


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: str
    detail: str = ""
    mandatory: bool = True
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.6g} ({self.threshold}) {self.detail}".rstrip()


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --- closed-form similarity ------------------------------------------------------


@_timed
def check_theory_similarity(n: int = 1000, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """Cosine of ``c*u + s*w`` against ``u`` equals ``c / sqrt(c^2 + s^2)``."""
    rng = np.random.default_rng(seed)
    basis = build_basis(16, 2, 2, 0.0, rng)
    u = basis.global_dir
    worst = 0.0
    for _ in range(n):
        c, s = rng.uniform(0, 10, size=2)
        w = analysis.random_complement_directions(u, 1, rng)[0]
        p = c * u + s * w
        cosine = float(p @ u / np.linalg.norm(p))
        worst = max(worst, abs(cosine - theory_similarity(c, s)))
    return CheckResult("theory_similarity", worst <= tol, worst, f"max abs error <= {tol:g}", f"{n} pairs")


# --- Chebyshev inequality ----------------------------------------------------------


def monotone_instance(rng: np.random.Generator, G: int) -> tuple[np.ndarray, np.ndarray]:
    """Random nonnegative ``(c, s)`` whose theory scores are nondecreasing in ``c``.

    ``c`` ascending with ``s`` descending makes ``c / sqrt(c^2 + s^2)`` follow
    the order of ``c``; a random permutation is applied to both.
    """
    c = np.sort(rng.uniform(0, 1, size=G))
    s = np.sort(rng.uniform(0, 1, size=G))[::-1]
    if rng.random() < 0.2:
        # ties in c
        c[: max(2, G // 2)] = c[0]
        s[: max(2, G // 2)] = s[0]
    perm = rng.permutation(G)
    return c[perm], s[perm]


@_timed
def check_chebyshev(n: int = 10_000, seed: int = 1, distribution=selection_distribution) -> CheckResult:
    """``E_pi[M] >= E_unif[M]`` everywhere, strictly when ``c`` varies and ``tau <= 10``."""
    rng = np.random.default_rng(seed)
    violations = strict_failures = strict_cases = 0
    min_gap = math.inf
    for _ in range(n):
        G = int(rng.integers(2, 9))
        c, s = monotone_instance(rng, G)
        tau = float(rng.uniform(0.05, 10.0))
        rep = analysis.expected_cfc(c, s, tau, distribution=distribution)
        if rep.gap < 0:
            violations += 1
        if np.ptp(c) > 0:
            strict_cases += 1
            if not rep.gap > 0:
                strict_failures += 1
        min_gap = min(min_gap, rep.gap)
    ok = violations == 0 and strict_failures == 0
    return CheckResult(
        "chebyshev_cfc", ok, violations, "violations == 0",
        f"strict failures {strict_failures}/{strict_cases}; min gap {min_gap:.3g}",
        data={"violations": violations, "strict_failures": strict_failures, "min_gap": min_gap},
    )


# --- sampling without replacement ------------------------------------------------------


SAMPLING_FIXTURES = [(G, s) for G in range(2, 7) for s in range(1, min(3, G) + 1)]


@_timed
def check_sampling_law(draws: int = 1_000_000, seed: int = 2, fixtures=None) -> CheckResult:
    """Empirical subset frequencies vs the exact enumeration law, each cell within 3 sigma."""
    fixtures = fixtures or SAMPLING_FIXTURES
    worst = 0.0
    cells = 0
    bad = []
    for i, (G, s) in enumerate(fixtures):
        rng = np.random.default_rng([seed, i])
        probs = selection_distribution(rng.normal(size=G), float(rng.uniform(0.3, 2.0)))
        exact = analysis.subset_probabilities(probs, s)
        picks = np.sort(sample_without_replacement_batch(probs, s, draws, rng), axis=1)
        codes = (picks * (G ** np.arange(s))).sum(axis=1)
        observed = dict(zip(*np.unique(codes, return_counts=True)))
        for subset, p in exact.items():
            key = int(sum(j * G**t for t, j in enumerate(sorted(subset))))
            freq = observed.get(key, 0) / draws
            sigma = math.sqrt(max(p * (1 - p), 0.0) / draws)
            # certain events (s = G) have sigma ~ 0; only rounding separates freq from p
            z = 0.0 if abs(freq - p) <= 1e-12 else abs(freq - p) / sigma
            worst = max(worst, z)
            cells += 1
            if z > 3:
                bad.append((G, s, tuple(sorted(subset)), round(z, 2)))
    return CheckResult(
        "sampling_law", not bad, worst, "max |z| <= 3 per subset",
        f"{cells} subsets over {len(fixtures)} fixtures; outside 3 sigma: {bad}",
        data={"outside": bad},
    )


@_timed
def check_set_mean_claim(n: int = 1000, G: int = 5, k: int = 2, tau: float = 1.0, seed: int = 3) -> CheckResult:
    """Logs how often the mean common content of a sampled set is at least ``E_pi``.

    Informational: the expected set mean is a mixture of later, renormalized
    draws, which favors lower-score groups, so the claimed direction is not
    expected to hold. The bracket ``E_unif <= set mean <= E_pi`` is recorded too.
    """
    rng = np.random.default_rng(seed)
    holds = bracket = 0
    examples = []
    for _ in range(n):
        c, s = monotone_instance(rng, G)
        r = analysis.set_mean_expectation(c, s, tau, k)
        holds += r.holds
        if r.expected_cfc_uniform - 1e-12 <= r.set_mean <= r.expected_cfc_pi + 1e-12:
            bracket += 1
        if not r.holds and len(examples) < 3:
            examples.append((np.round(c, 3).tolist(), np.round(s, 3).tolist(), r.set_mean, r.expected_cfc_pi))
    frac = holds / n
    return CheckResult(
        "set_mean_ge_pi_claim", frac >= 0.99, frac, "fraction >= 0.99 (claimed)",
        f"held on {holds}/{n}; E_unif <= set mean <= E_pi on {bracket}/{n}",
        mandatory=False, data={"holds": holds, "bracket": bracket, "examples": examples},
    )


@_timed
def check_set_mean_enumeration(seed: int = 4, draws: int = 200_000) -> CheckResult:
    """Exact set-mean enumeration against Monte Carlo, and its k=1 / k=G limits."""
    rng = np.random.default_rng(seed)
    worst_z = 0.0
    worst_limit = 0.0
    for G in (3, 5, 7):
        c, s = monotone_instance(rng, G)
        rep = analysis.expected_cfc(c, s, 1.0)
        for k in range(1, G + 1):
            exact = analysis.set_mean_expectation(c, s, 1.0, k).set_mean
            picks = sample_without_replacement_batch(rep.probs, k, draws, rng)
            vals = c[picks].mean(axis=1)
            se = vals.std(ddof=1) / math.sqrt(draws)
            diff = abs(vals.mean() - exact)
            if diff > 1e-12:  # constant-valued sets agree up to rounding
                worst_z = max(worst_z, diff / se)
        worst_limit = max(
            worst_limit,
            abs(analysis.set_mean_expectation(c, s, 1.0, 1).set_mean - rep.expected_cfc_pi),
            abs(analysis.set_mean_expectation(c, s, 1.0, G).set_mean - rep.expected_cfc_uniform),
        )
    ok = worst_z <= 4.5 and worst_limit <= 1e-12
    return CheckResult("set_mean_enumeration", ok, worst_z, "max |z| <= 4.5, limits within 1e-12",
                       f"limit error {worst_limit:.3g}")


# --- noise suppression, SNR ordering, common coefficient ------------------------------


NOISE_GRID = [(2, 1), (2, 2), (4, 2), (8, 2), (16, 2)]


@_timed
def check_noise_scaling(repetitions: int = 200, seed: int = 5, grid=None) -> CheckResult:
    res = analysis.noise_scaling_experiment(grid or NOISE_GRID, repetitions, np.random.default_rng(seed))
    ok = abs(res.slope + 1.0) <= 0.15
    return CheckResult("noise_scaling_slope", ok, res.slope, "slope in [-1.15, -0.85]",
                       f"n*k {res.products.astype(int).tolist()}", data={"power": res.noise_power.tolist()})


@_timed
def check_snr_ordering(n: int = 200, seed: int = 6, tol: float = 1e-12) -> CheckResult:
    """Min-slot SNR ordering full <= fixed <= dynamic on every instance, dynamic > fixed on >= 90%."""
    rng = np.random.default_rng(seed)
    order_violations = strict = 0
    ratios = []
    for _ in range(n):
        basis, P, prev = analysis.snr_instance(rng)
        r = analysis.strategy_snrs(basis, P, prev, s=2)
        if not (r.snr_full <= r.snr_fixed * (1 + tol) + tol and r.snr_fixed <= r.snr_dynamic * (1 + tol) + tol):
            order_violations += 1
        strict += r.snr_dynamic > r.snr_fixed
        ratios.append(r.snr_dynamic / r.snr_fixed)
    frac = strict / n
    ok = order_violations == 0 and frac >= 0.9
    return CheckResult(
        "snr_ordering", ok, frac, "no ordering violation, strict fraction >= 0.9",
        f"violations {order_violations}; min dyn/fixed ratio {min(ratios):.3g}",
        data={"violations": order_violations},
    )


@_timed
def check_alpha_monotone(n: int = 50, seed: int = 7, tol: float = 1e-9) -> CheckResult:
    """Common coefficient of the global prompt never decreases under pure top-s aggregation."""
    rng = np.random.default_rng(seed)
    worst = math.inf
    violations = 0
    for _ in range(n):
        alphas = analysis.pure_aggregation_alpha(rng, policy="top_s")
        steps = np.diff(alphas)
        worst = min(worst, float(steps.min()))
        violations += int(np.sum(steps < -tol))
    return CheckResult("alpha_monotone_pure_aggregation", violations == 0, worst,
                       f"min round-to-round change >= -{tol:g}", f"{violations} decreasing steps")


# --- gradients --------------------------------------------------------------------------


def _unit(v):
    return v / np.linalg.norm(v)


def reference_loss(enc, prompts: PromptGroupSet, X, y, lam: float, form: str, classes, literal: bool) -> float:
    """Total training loss evaluated with explicit loops (independent of the vectorized model)."""
    G = prompts.n_groups
    classes = list(classes)
    T = [[_unit(enc.text_map @ (enc.class_embeddings[k] + enc.text_prompt_inject @ prompts.text[g])) for k in classes]
         for g in range(G)]
    F = [[_unit(enc.image_map @ (x + enc.visual_prompt_inject @ prompts.visual[g])) for x in X] for g in range(G)]
    ce = 0.0
    for g in range(G):
        for b, label in enumerate(y):
            logits = np.array([F[g][b] @ t for t in T[g]]) / enc.model_temperature
            m = logits.max()
            log_z = m + math.log(np.sum(np.exp(logits - m)))
            ce -= logits[classes.index(int(label))] - log_z
    ce /= G * len(y)

    def pair(a, b):
        if literal:
            return 1.0 - a @ b
        if form == "cos":
            return a @ b
        if form == "l2":
            return -np.sum((a - b) ** 2)
        return -np.sum(np.abs(a - b))

    div = 0.0
    if G > 1:
        for g, h in itertools.permutations(range(G), 2):
            div += sum(pair(T[g][k], T[h][k]) for k in range(len(classes)))
            div += sum(pair(F[g][b], F[h][b]) for b in range(len(X))) / len(X)
        if not literal:
            div /= G * (G - 1)
    return ce + lam * div


def gradient_configs(n: int = 24, seed: int = 8):
    """Random (lam, form, literal, G) combinations covering every lam in {0, 1, 5} and every form."""
    combos = [(lam, form, lit) for lam in (0.0, 1.0, 5.0) for form, lit in
              (("cos", False), ("l2", False), ("l1", False), ("cos", True))]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        lam, form, lit = combos[i % len(combos)]
        out.append({"lam": lam, "form": form, "literal": lit, "G": int(rng.integers(1, 5)), "seed": seed * 1000 + i})
    return out


def gradient_error(cfg: dict, h: float = 1e-6) -> float:
    rng = np.random.default_rng(cfg["seed"])
    d, d_f, d_p, K, B = 10, 8, 4, 4, 5
    protos = rng.normal(size=(K, d))
    enc = build_encoders(protos, d_f, d_p, d_p, rng)
    prompts = init_prompts(cfg["G"], d_p, d_p, 0.5, rng)
    X = rng.normal(size=(B, d))
    classes = list(range(K))
    y = rng.integers(0, K, size=B)
    _, grads = loss_and_gradient(enc, prompts, X, y, cfg["lam"], cfg["form"], classes, cfg["literal"])
    analytic = np.concatenate([grads.text.ravel(), grads.visual.ravel()])
    numeric = np.zeros_like(analytic)
    flat = np.concatenate([prompts.text.ravel(), prompts.visual.ravel()])
    nt = prompts.text.size

    def loss_at(v):
        p = PromptGroupSet(v[:nt].reshape(prompts.text.shape), v[nt:].reshape(prompts.visual.shape))
        return reference_loss(enc, p, X, y, cfg["lam"], cfg["form"], classes, cfg["literal"])

    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = h
        numeric[i] = (loss_at(flat + e) - loss_at(flat - e)) / (2 * h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@_timed
def check_gradients(n: int = 24, seed: int = 8, tol: float = 1e-4) -> CheckResult:
    errors = [gradient_error(cfg) for cfg in gradient_configs(n, seed)]
    worst = max(errors)
    return CheckResult("gradient_finite_difference", worst < tol, worst, f"max relative error < {tol:g}",
                       f"{n} configurations")


# --- softmax and selection invariances ------------------------------------------------------


@_timed
def check_softmax_invariance(n: int = 500, seed: int = 9) -> CheckResult:
    """Shift invariance, normalization, order preservation and the uniform limit of the selection softmax."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        G = int(rng.integers(1, 9))
        scores = rng.normal(size=G) * 3
        tau = float(rng.uniform(0.05, 5))
        p = selection_distribution(scores, tau)
        worst = max(worst, abs(p.sum() - 1.0))
        worst = max(worst, float(np.max(np.abs(p - selection_distribution(scores + rng.normal() * 5, tau)))))
        # |p_g - 1/G| <= ptp(scores) / tau to first order in the uniform limit
        limit_dev = float(np.max(np.abs(selection_distribution(scores, 1e9) - 1.0 / G)))
        worst = max(worst, limit_dev - np.ptp(scores) / 1e9)
        if np.any(np.diff(p[np.argsort(scores)]) < -1e-15):
            worst = max(worst, 1.0)
    return CheckResult("softmax_invariance", worst <= 1e-9, worst, "max deviation <= 1e-9")


@_timed
def check_sampler_paths(seed: int = 10, n: int = 2000) -> CheckResult:
    """Batched and sequential samplers give identical draws from identical streams."""
    mismatches = 0
    for G in range(1, 8):
        for s in range(1, G + 1):
            probs = np.random.default_rng([seed, G, s]).dirichlet(np.ones(G))
            batch = sample_without_replacement_batch(probs, s, n, np.random.default_rng(seed))
            rng = np.random.default_rng(seed)
            seq = np.array([sample_without_replacement(probs, s, rng) for _ in range(n)])
            mismatches += int(np.sum(np.any(batch != seq, axis=1)))
    return CheckResult("sampler_paths_agree", mismatches == 0, mismatches, "mismatching draws == 0")


# --- federation-level checks ---------------------------------------------------------------


def metric_stream(records) -> list:
    """Everything a run reports per round except the strategy label and selection metadata."""
    out = []
    for r in records:
        out.append((
            r.round,
            tuple(r.participants),
            tuple(sorted((c, lb.ce, lb.div, lb.total) for c, lb in r.losses.items() if lb is not None)),
            tuple(sorted((c, tuple(sorted(m.items()))) for c, m in r.metrics.items())),
            tuple(sorted(r.mean_metrics.items())),
            tuple(sorted(r.snr.items())),
            r.alpha_g,
            r.uplink_scalars,
            r.global_digest,
        ))
    return out


def _same(a, b) -> bool:
    """Equality that treats NaN as equal to NaN (bit-level comparison of metric streams)."""
    if isinstance(a, tuple | list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float):
        return (math.isnan(a) and math.isnan(b)) or a == b
    return a == b


@_timed
def check_fedavg_reduction(rounds: int = 10, seed: int = 0) -> CheckResult:
    """Dynamic with s = G, policy all, ordinal slots reproduces full averaging exactly."""
    base = benchmark_config(rounds=rounds, seed=seed)
    full, _ = run_federation(benchmark_config(**{**base.to_dict(), "strategy": "full"}))
    dyn, _ = run_federation(benchmark_config(**{
        **base.to_dict(), "strategy": "dynamic", "select_s": base.groups, "policy": "all", "aggregation": "ordinal",
    }))
    a, b = metric_stream(full), metric_stream(dyn)
    first = next((i + 1 for i, (x, y) in enumerate(zip(a, b)) if not _same(x, y)), None)
    ok = _same(a, b)
    return CheckResult("fedavg_reduction", ok, 0 if ok else first, "identical metric streams",
                       f"{rounds} rounds" + ("" if ok else f"; first differing round {first}"))


@_timed
def check_comm_ratio(G: int = 5, s: int = 2, d_pt: int = 16, d_pv: int = 16) -> CheckResult:
    full = analysis.comm_cost("full", G, s, d_pt, d_pv)["uplink"]
    dyn = analysis.comm_cost("dynamic", G, s, d_pt, d_pv)["uplink"]
    ratio = dyn / full
    ok = dyn < full and dyn * G == full * s
    return CheckResult("comm_uplink_ratio", ok, ratio, f"== s/G = {s}/{G}", f"dynamic {dyn} vs full {full}")


MANDATORY_CHECKS = (
    check_theory_similarity,
    check_chebyshev,
    check_sampling_law,
    check_set_mean_enumeration,
    check_noise_scaling,
    check_snr_ordering,
    check_alpha_monotone,
    check_gradients,
    check_softmax_invariance,
    check_sampler_paths,
    check_fedavg_reduction,
    check_comm_ratio,
)
INFORMATIONAL_CHECKS = (check_set_mean_claim,)


def run_all(log=print) -> list[CheckResult]:
    results = []
    for fn in MANDATORY_CHECKS + INFORMATIONAL_CHECKS:
        res = fn()
        results.append(res)
        if log:
            log(res.line() + ("" if res.mandatory else " [informational]"))
    return results
