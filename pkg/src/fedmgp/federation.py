"""The federated training loop: client sampling, local updates, selection, aggregation, write-back, evaluation."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import analysis
from .aggregation import (
    DYNAMIC_MODES,
    STRATEGIES,
    GlobalPromptState,
    aggregate_dynamic,
    aggregate_fixed,
    aggregate_full,
    indexed_selection,
    writeback,
)
from .data import (
    ClientDataset,
    dirichlet_partition,
    generate_client_data,
    make_task,
    pathological_split,
    sample_features,
)
from .features import build_basis
from .model import (
    DIVERSITY_FORMS,
    INFERENCE_STRATEGIES,
    LossBreakdown,
    PromptGroupSet,
    build_encoders,
    ensemble_predict,
    init_prompts,
    local_update,
)
from .selection import MODALITIES, PAIRING_MODES, POLICIES, SelectionOutcome, select_groups

log = logging.getLogger(__name__)

# RNG stream identifiers; every stream is keyed by (seed, purpose, ...)
_WORLD, _DATA, _EVAL, _INIT, _SAMPLE_CLIENTS, _TRAIN, _SELECT = range(7)


@dataclass
class FederationConfig:
    n_clients: int = 10
    participation: float = 1.0
    rounds: int = 10
    local_epochs: int = 2
    groups: int = 5
    select_s: int = 2
    tau_sel: float = 1.0
    lam: float = 1.0
    lr: float = 0.001
    batch_size: int = 8
    strategy: str = "dynamic"
    policy: str = "probabilistic"
    pairing: str = "set_sum"
    aggregation: str = "ordinal"
    diversity: str = "cos"
    literal_eq4: bool = False
    coupled: bool = False
    inference: str = "average_probs"
    seed: int = 0
    regime: str = "pathological"
    dirichlet_alpha: float = 0.5
    n_classes: int = 40
    shots: int = 16
    dim: int = 64
    feature_dim: int = 64
    prompt_dim_text: int = 16
    prompt_dim_visual: int = 16
    model_temperature: float = 0.07
    n_noise: int = 8
    mixing_rho: float = 0.3
    signal_scale: float = 1.0
    client_shift: float = 2.0
    noise_sigma: float = 0.3
    encoder_distortion: float = 0.5
    text_noise: float = 0.5
    text_bias: float = 1.0
    aligned_prompts: bool = True
    init_std: float = 0.02
    eval_per_class: int = 10
    threads: int = 1

    def validate(self) -> "FederationConfig":
        checks = [
            (self.n_clients >= 1, "n_clients must be >= 1"),
            (0 < self.participation <= 1, "participation must lie in (0, 1]"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.local_epochs >= 0, "local_epochs must be >= 0"),
            (self.groups >= 1, "groups must be >= 1"),
            (1 <= self.select_s <= self.groups, "select_s must satisfy 1 <= s <= groups"),
            (self.tau_sel > 0, "tau_sel must be positive"),
            (self.lr > 0, "lr must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.model_temperature > 0, "model_temperature must be positive"),
            (self.lam >= 0, "lambda must be nonnegative"),
            (self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
            (self.policy in POLICIES, f"policy must be one of {POLICIES}"),
            (self.pairing in PAIRING_MODES, f"pairing must be one of {PAIRING_MODES}"),
            (self.aggregation in DYNAMIC_MODES, f"aggregation must be one of {DYNAMIC_MODES}"),
            (self.diversity in DIVERSITY_FORMS, f"diversity must be one of {DIVERSITY_FORMS}"),
            (self.regime in ("pathological", "dirichlet"), "regime must be pathological or dirichlet"),
            (self.dirichlet_alpha > 0, "dirichlet_alpha must be positive"),
            (self.shots >= 1 and self.eval_per_class >= 1, "shots and eval_per_class must be >= 1"),
            (0 <= self.mixing_rho <= 1, "mixing_rho must lie in [0, 1]"),
            (self.threads >= 1, "threads must be >= 1"),
            (
                self.inference in INFERENCE_STRATEGIES or self.inference.startswith("single_group:"),
                f"inference must be one of {INFERENCE_STRATEGIES}",
            ),
            (
                not (self.strategy == "dynamic" and self.pairing == "slotwise" and self.aggregation == "ordinal"
                     and self.select_s != self.groups),
                "slotwise pairing needs one global slot per group (use a slotwise aggregation mode)",
            ),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


# The frozen towers here are tiny next to a real vision-language model, so the
# benchmark needs a much larger step than the documented default rate.
BENCHMARK_LR = 0.5


def benchmark_config(**overrides) -> FederationConfig:
    """The default synthetic benchmark: config defaults with ``lr = BENCHMARK_LR``."""
    return FederationConfig(**{"lr": BENCHMARK_LR, **overrides}).validate()


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)``; unaffected by how other streams were consumed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass
class EvalSet:
    X: np.ndarray
    y: np.ndarray
    classes: tuple[int, ...]


@dataclass
class FederationState:
    config: FederationConfig
    basis: object
    task: object
    encoders: object
    datasets: list[ClientDataset]
    eval_sets: list[dict[str, EvalSet]]
    client_prompts: list[PromptGroupSet]
    global_state: GlobalPromptState
    round: int = 0


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    losses: dict[int, LossBreakdown]
    selections: dict[int, dict[str, SelectionOutcome]]
    global_digest: str
    metrics: dict[int, dict[str, float]]
    mean_metrics: dict[str, float]
    snr: dict[str, float]
    alpha_g: float
    uplink_scalars: int
    uplink_metadata: int
    n_slots: int = 0
    extra: dict = field(default_factory=dict)


# --- setup --------------------------------------------------------------------


def _prompt_frame(basis, extra, k: int) -> np.ndarray:
    rows = np.vstack([basis.global_dir[None, :], basis.client_frame, basis.noise_dirs, extra])
    return rows[:k]


def build_world(config: FederationConfig):
    """Basis, task and frozen encoders for a config (a pure function of the seed).

    The class embeddings lack ``text_bias`` units of the shared component
    ``u_C``, which text prompts can restore. With ``aligned_prompts`` the
    prompt injections span ``u_C``, the client directions and then the noise
    directions.
    """
    rng = stream(config.seed, _WORLD)
    K = config.n_classes
    d_p = max(config.prompt_dim_text, config.prompt_dim_visual)
    n_client_frame = (config.n_clients if config.mixing_rho < 1 else 0) + (1 if config.mixing_rho > 0 else 0)
    n_fill = max(0, d_p - (1 + n_client_frame + config.n_noise))
    basis = build_basis(config.dim, config.n_clients, config.n_noise, config.mixing_rho, rng, n_free=K + n_fill)
    task = make_task(basis, K)
    frames = {}
    if config.aligned_prompts:
        extra = basis.free_dirs[K:]
        frames = {
            "text_frame": _prompt_frame(basis, extra, config.prompt_dim_text),
            "visual_frame": _prompt_frame(basis, extra, config.prompt_dim_visual),
        }
    enc = build_encoders(
        task.prototypes,
        config.feature_dim,
        config.prompt_dim_text,
        config.prompt_dim_visual,
        rng,
        distortion=config.encoder_distortion,
        text_noise=config.text_noise,
        model_temperature=config.model_temperature,
        text_bias=-config.text_bias * basis.global_dir,
        **frames,
    )
    return basis, task, enc


def _eval_pool(config, basis, task, classes, shifts, rng) -> EvalSet:
    labels = np.repeat(np.asarray(classes, dtype=int), config.eval_per_class)
    shift_rows = np.repeat(np.asarray(shifts), config.eval_per_class, axis=0)
    X = sample_features(task, basis, labels, np.zeros(basis.dim), config.signal_scale, config.noise_sigma, rng)
    return EvalSet(X + shift_rows, labels, tuple(int(k) for k in classes))


def _subset(pool: EvalSet, classes) -> EvalSet:
    classes = tuple(int(k) for k in classes)
    keep = np.isin(pool.y, classes)
    return EvalSet(pool.X[keep], pool.y[keep], classes)


def build_datasets(config: FederationConfig, basis, task):
    """Training sets and the (local, base_other, novel) evaluation sets of every client."""
    N, K = config.n_clients, config.n_classes
    shift = config.client_shift * basis.client_dirs
    population_shift = shift.mean(axis=0)
    datasets, eval_sets = [], []
    if config.regime == "pathological":
        base, novel, assignments = pathological_split(K, N, stream(config.seed, _DATA, 0))
        owner = {k: c for c, ks in enumerate(assignments) for k in ks}
        for c in range(N):
            counts = np.zeros(K, dtype=int)
            counts[list(assignments[c])] = config.shots
            datasets.append(generate_client_data(
                task, basis, c, counts, config.signal_scale, config.client_shift, config.noise_sigma,
                stream(config.seed, _DATA, 1, c), allowed=assignments[c],
            ))
        erng = stream(config.seed, _EVAL)
        base_pool = _eval_pool(config, basis, task, base, [shift[owner[k]] for k in base], erng)
        novel_pool = _eval_pool(config, basis, task, novel, [population_shift] * len(novel), erng)
        for c in range(N):
            others = [k for k in base if k not in assignments[c]]
            eval_sets.append({
                "local": _subset(base_pool, assignments[c]),
                "base_other": _subset(base_pool, others) if others else None,
                "novel": novel_pool if novel else None,
            })
    else:
        _, counts = dirichlet_partition(K, N, config.dirichlet_alpha, config.shots * N, stream(config.seed, _DATA, 0))
        erng = stream(config.seed, _EVAL)
        everything = _eval_pool(config, basis, task, range(K), [population_shift] * K, erng)
        for c in range(N):
            datasets.append(generate_client_data(
                task, basis, c, counts[c], config.signal_scale, config.client_shift, config.noise_sigma,
                stream(config.seed, _DATA, 1, c),
            ))
            seen = np.flatnonzero(counts[c])
            local = _eval_pool(config, basis, task, seen, [shift[c]] * len(seen), erng)
            eval_sets.append({"local": EvalSet(local.X, local.y, tuple(range(K))), "base_other": everything, "novel": None})
    return datasets, eval_sets


def init_state(config: FederationConfig) -> FederationState:
    config.validate()
    basis, task, enc = build_world(config)
    datasets, eval_sets = build_datasets(config, basis, task)
    p0 = init_prompts(config.groups, config.prompt_dim_text, config.prompt_dim_visual, config.init_std,
                      stream(config.seed, _INIT))
    g0 = GlobalPromptState(0, p0.text.copy(), p0.visual.copy(), config.strategy, "indexed")
    clients = [p0.copy() for _ in range(config.n_clients)]
    return FederationState(config, basis, task, enc, datasets, eval_sets, clients, g0)


# --- evaluation -----------------------------------------------------------------


def harmonic_mean(base: float, novel: float) -> float:
    if base + novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


def combined_metric(local: float, hm: float) -> float:
    return (local + hm) / 2.0


def accuracy(enc, prompts: PromptGroupSet, ev: EvalSet, strategy: str = "average_probs") -> float:
    if ev is None or len(ev.y) == 0:
        return float("nan")
    probs = ensemble_predict(enc, prompts, ev.X, strategy, classes=ev.classes)
    pred = np.asarray(ev.classes)[np.argmax(probs, axis=1)]
    return float(np.mean(pred == ev.y))


def summarize(local: float, base: float, novel: float) -> dict[str, float]:
    if math.isnan(base) or math.isnan(novel):
        hm = float("nan")
    else:
        hm = harmonic_mean(base, novel)
    return {"local": local, "base": base, "novel": novel, "hm": hm, "cm": combined_metric(local, hm)}


def evaluate(enc, prompts: PromptGroupSet, eval_sets: dict, strategy: str = "average_probs") -> dict[str, float]:
    """Accuracy on the local / other-clients' base / novel sets plus HM and CM."""
    present = [k for k in ("local", "base_other", "novel") if eval_sets.get(k) is not None and len(eval_sets[k].y)]
    if not present:
        raise ValueError("all evaluation sets are empty")
    acc = {k: accuracy(enc, prompts, eval_sets.get(k), strategy) for k in ("local", "base_other", "novel")}
    return summarize(acc["local"], acc["base_other"], acc["novel"])


# --- one round ------------------------------------------------------------------


def _sample_participants(config: FederationConfig, round_idx: int) -> list[int]:
    m = math.ceil(config.participation * config.n_clients)
    if m >= config.n_clients:
        return list(range(config.n_clients))
    rng = stream(config.seed, _SAMPLE_CLIENTS, round_idx)
    return sorted(int(c) for c in rng.choice(config.n_clients, size=m, replace=False))


def _client_update(state: FederationState, c: int, round_idx: int):
    cfg = state.config
    return local_update(
        state.client_prompts[c], state.encoders, state.datasets[c], cfg.local_epochs, cfg.lr, cfg.batch_size,
        cfg.lam, cfg.diversity, stream(cfg.seed, _TRAIN, round_idx, c), cfg.literal_eq4,
    )


def _select(state: FederationState, prompts: PromptGroupSet, c: int, round_idx: int):
    cfg = state.config
    G, s = cfg.groups, cfg.select_s
    if cfg.strategy == "full":
        return indexed_selection({m: list(range(G)) for m in MODALITIES}, "all")
    if cfg.strategy == "fixed":
        return indexed_selection({m: list(range(s)) for m in MODALITIES}, "fixed")
    g = state.global_state
    return select_groups(
        {"text": prompts.text, "visual": prompts.visual},
        {"text": g.text_slots, "visual": g.visual_slots},
        cfg.policy, s, cfg.tau_sel, round_idx, stream(cfg.seed, _SELECT, round_idx, c), cfg.pairing, cfg.coupled,
    )


def _aggregate(state: FederationState, participants, updated, selections, round_idx):
    cfg = state.config
    sets = [updated[c] for c in participants]
    counts = [state.datasets[c].n for c in participants]
    if cfg.strategy == "full":
        g = aggregate_full(sets, counts, round_idx)
    elif cfg.strategy == "fixed":
        g = aggregate_fixed(sets, counts, cfg.select_s, round_idx)
    else:
        g = aggregate_dynamic(
            [selections[c] for c in participants], sets, counts, cfg.aggregation, state.global_state, round_idx
        )
    return g


def injected_slots(state: FederationState, g: GlobalPromptState) -> dict[str, np.ndarray]:
    """Global slots mapped into the input feature space by the frozen prompt injections."""
    enc = state.encoders
    return {
        "text": g.text_slots @ enc.text_prompt_inject.T,
        "visual": g.visual_slots @ enc.visual_prompt_inject.T,
    }


def slot_theory_metrics(state: FederationState, g: GlobalPromptState) -> tuple[dict, float]:
    snr = {}
    betas = []
    for m, slots in injected_slots(state, g).items():
        nz = np.flatnonzero(np.any(slots != 0, axis=1))
        if len(nz) == 0:
            snr[m] = float("nan")
            continue
        rep = analysis.slot_snr(slots, state.basis)
        snr[m] = rep.min_snr
        betas.extend(rep.beta.tolist())
    snr["min"] = float(np.nanmin([snr["text"], snr["visual"]]))
    return snr, float(np.mean(betas)) if betas else float("nan")


def _digest(g: GlobalPromptState) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(g.text_slots).tobytes())
    h.update(np.ascontiguousarray(g.visual_slots).tobytes())
    return h.hexdigest()[:16]


def run_round(state: FederationState) -> RoundRecord:
    """Advance the federation by one round in place and return its record."""
    cfg = state.config
    t = state.round + 1
    participants = _sample_participants(cfg, t)

    if cfg.threads > 1 and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(lambda c: _client_update(state, c, t), participants))
    else:
        results = [_client_update(state, c, t) for c in participants]
    updated = {c: res[0] for c, res in zip(participants, results)}
    losses = {c: (res[1][-1] if res[1] else None) for c, res in zip(participants, results)}

    selections = {c: _select(state, updated[c], c, t) for c in participants}
    g = _aggregate(state, participants, updated, selections, t)
    for c in participants:
        state.client_prompts[c] = writeback(updated[c], g, selections[c])
    state.global_state = g
    state.round = t

    metrics = {
        c: evaluate(state.encoders, state.client_prompts[c], state.eval_sets[c], cfg.inference)
        for c in range(cfg.n_clients)
    }
    # HM and CM of the round come from the client-averaged accuracies
    mean_metrics = summarize(*(float(np.mean([m[k] for m in metrics.values()])) for k in ("local", "base", "novel")))
    snr, alpha = slot_theory_metrics(state, g)
    cost = analysis.comm_cost(cfg.strategy, cfg.groups, cfg.select_s, cfg.prompt_dim_text, cfg.prompt_dim_visual,
                              cfg.aggregation)
    log.debug("round %d: cm=%.4f min_snr=%.4g", t, mean_metrics["cm"], snr["min"])
    return RoundRecord(
        round=t,
        participants=participants,
        losses=losses,
        selections=selections,
        global_digest=_digest(g),
        metrics=metrics,
        mean_metrics=mean_metrics,
        snr=snr,
        alpha_g=alpha,
        uplink_scalars=cost["uplink"],
        uplink_metadata=cost["uplink_metadata"],
        n_slots=g.n_slots,
    )


class RoundFailure(RuntimeError):
    def __init__(self, round_idx: int, cause: Exception):
        super().__init__(f"round {round_idx} failed: {cause}")
        self.round = round_idx


def run_federation(config: FederationConfig) -> tuple[list[RoundRecord], FederationState]:
    state = init_state(config)
    records = []
    for _ in range(config.rounds):
        try:
            records.append(run_round(state))
        except Exception as exc:
            raise RoundFailure(state.round + 1, exc) from exc
    return records, state


def checkpoint(state: FederationState) -> dict:
    g = state.global_state
    return {
        "round": state.round,
        "global": {
            "strategy": g.strategy,
            "mode": g.mode,
            "text_slots": g.text_slots.tolist(),
            "visual_slots": g.visual_slots.tolist(),
        },
        "clients": [{"text": p.text.tolist(), "visual": p.visual.tolist()} for p in state.client_prompts],
        "basis": state.basis.to_dict(),
    }
