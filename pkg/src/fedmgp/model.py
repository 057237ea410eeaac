"""Frozen two-tower encoder with learnable multi-group text/visual prompts.

Prompts are injected additively in the encoder input space: a text prompt
perturbs every class embedding (``e_k + U p_t``) and a visual prompt perturbs
every image (``x + V p_v``). Both towers are linear maps followed by L2
normalization, and class scores are cosine similarities over a temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import DegenerateError

DIVERSITY_FORMS = ("cos", "l1", "l2")
INFERENCE_STRATEGIES = ("average_probs", "max_logits", "feature_avg", "single_group")
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class FrozenEncoders:
    text_map: np.ndarray  # W_g (d_f, d)
    image_map: np.ndarray  # W_f (d_f, d)
    text_prompt_inject: np.ndarray  # U (d, d_pt)
    visual_prompt_inject: np.ndarray  # V (d, d_pv)
    class_embeddings: np.ndarray  # (K, d)
    model_temperature: float = 0.07

    def __post_init__(self):
        if self.model_temperature <= 0:
            raise ValueError("model temperature must be positive")
        for name in ("text_map", "image_map", "text_prompt_inject", "visual_prompt_inject", "class_embeddings"):
            getattr(self, name).setflags(write=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_embeddings)

    @property
    def prompt_dims(self) -> tuple[int, int]:
        return self.text_prompt_inject.shape[1], self.visual_prompt_inject.shape[1]


@dataclass
class PromptGroupSet:
    text: np.ndarray  # (G, d_pt)
    visual: np.ndarray  # (G, d_pv)

    def __post_init__(self):
        self.text = np.array(self.text, dtype=float)
        self.visual = np.array(self.visual, dtype=float)
        if self.text.ndim != 2 or self.visual.ndim != 2 or len(self.text) != len(self.visual):
            raise ValueError("text and visual prompts must be (G, dim) arrays with equal G")
        if len(self.text) < 1:
            raise ValueError("need at least one prompt group")
        if not (np.all(np.isfinite(self.text)) and np.all(np.isfinite(self.visual))):
            raise ValueError("prompts must be finite")

    @property
    def n_groups(self) -> int:
        return len(self.text)

    @property
    def n_params(self) -> int:
        return self.text.size + self.visual.size

    def copy(self) -> "PromptGroupSet":
        return PromptGroupSet(self.text.copy(), self.visual.copy())

    def modality(self, name: str) -> np.ndarray:
        if name == "text":
            return self.text
        if name == "visual":
            return self.visual
        raise ValueError(f"unknown modality {name!r}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    div: float
    total: float
    lam: float


@dataclass
class PromptGradients:
    text: np.ndarray
    visual: np.ndarray


def build_encoders(
    task_prototypes: np.ndarray,
    d_f: int,
    d_pt: int,
    d_pv: int,
    rng: np.random.Generator,
    distortion: float = 0.5,
    text_noise: float = 0.5,
    model_temperature: float = 0.07,
    text_bias: np.ndarray | None = None,
    text_frame: np.ndarray | None = None,
    visual_frame: np.ndarray | None = None,
) -> FrozenEncoders:
    """Random frozen towers loosely aligned with the class prototypes.

    Both towers share a random projection and each adds its own independent
    distortion, so zero-shot prediction works only partially. Class
    embeddings are the prototypes perturbed by isotropic noise of relative
    size ``text_noise``, plus an optional common ``text_bias``.

    ``text_frame`` / ``visual_frame`` (orthonormal rows) fix the directions a
    prompt can move an input along; by default these are random.
    """
    K, d = task_prototypes.shape
    shared = rng.standard_normal((d_f, d)) / np.sqrt(d_f)
    image_map = shared + distortion * rng.standard_normal((d_f, d)) / np.sqrt(d_f)
    text_map = shared + distortion * rng.standard_normal((d_f, d)) / np.sqrt(d_f)
    scale = np.linalg.norm(task_prototypes, axis=1, keepdims=True)
    class_embeddings = task_prototypes + text_noise * scale * rng.standard_normal((K, d)) / np.sqrt(d)
    if text_bias is not None:
        class_embeddings = class_embeddings + np.asarray(text_bias, dtype=float)[None, :]
    U = rng.standard_normal((d, d_pt)) / np.sqrt(d_pt)
    V = rng.standard_normal((d, d_pv)) / np.sqrt(d_pv)
    if text_frame is not None:
        U = _frame_columns(text_frame, d, d_pt)
    if visual_frame is not None:
        V = _frame_columns(visual_frame, d, d_pv)
    return FrozenEncoders(text_map, image_map, U, V, class_embeddings, model_temperature)


def _frame_columns(frame, d: int, k: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (k, d):
        raise ValueError(f"prompt frame must have shape ({k}, {d}), got {frame.shape}")
    return frame.T.copy()


def init_prompts(G: int, d_pt: int, d_pv: int, std: float, rng: np.random.Generator) -> PromptGroupSet:
    return PromptGroupSet(std * rng.standard_normal((G, d_pt)), std * rng.standard_normal((G, d_pv)))


def _normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < _NORM_EPS):
        raise DegenerateError("cannot normalize a zero feature")
    return v / norm, norm


def _normalize_backward(grad: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (grad - unit * np.sum(unit * grad, axis=-1, keepdims=True)) / norm


def _classes(enc: FrozenEncoders, classes) -> np.ndarray:
    if classes is None:
        return np.arange(enc.n_classes)
    return np.asarray(classes, dtype=int)


def text_feature(enc: FrozenEncoders, class_id: int, p_t: np.ndarray) -> np.ndarray:
    if not 0 <= class_id < enc.n_classes:
        raise IndexError(f"class {class_id} out of range")
    h = enc.text_map @ (enc.class_embeddings[class_id] + enc.text_prompt_inject @ p_t)
    return _normalize(h)[0]


def image_feature(enc: FrozenEncoders, x: np.ndarray, p_v: np.ndarray) -> np.ndarray:
    z = enc.image_map @ (np.asarray(x, dtype=float) + enc.visual_prompt_inject @ p_v)
    return _normalize(z)[0]


@dataclass
class _Forward:
    """Cached forward quantities for all groups on one batch."""

    T: np.ndarray  # (G, K', d_f) unit text features
    t_norm: np.ndarray  # (G, K', 1)
    F: np.ndarray  # (G, B, d_f) unit image features
    f_norm: np.ndarray  # (G, B, 1)
    logits: np.ndarray  # (G, B, K')
    probs: np.ndarray  # (G, B, K')
    classes: np.ndarray = field(repr=False)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(enc: FrozenEncoders, prompts: PromptGroupSet, X: np.ndarray, classes=None) -> _Forward:
    classes = _classes(enc, classes)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    text_shift = prompts.text @ enc.text_prompt_inject.T  # (G, d)
    vis_shift = prompts.visual @ enc.visual_prompt_inject.T  # (G, d)
    A = enc.class_embeddings[classes][None, :, :] + text_shift[:, None, :]
    T, t_norm = _normalize(A @ enc.text_map.T)
    Bm = X[None, :, :] + vis_shift[:, None, :]
    F, f_norm = _normalize(Bm @ enc.image_map.T)
    logits = np.einsum("gbf,gkf->gbk", F, T) / enc.model_temperature
    return _Forward(T, t_norm, F, f_norm, logits, _softmax(logits), classes)


def _label_index(classes: np.ndarray, y: np.ndarray) -> np.ndarray:
    lookup = {int(k): i for i, k in enumerate(classes)}
    try:
        return np.array([lookup[int(v)] for v in y], dtype=int)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not in the candidate class set") from None


def group_class_probs(enc: FrozenEncoders, prompts: PromptGroupSet, j: int, x: np.ndarray, classes=None) -> np.ndarray:
    """Class distribution of group ``j`` for a single input (or a batch of inputs)."""
    if not 0 <= j < prompts.n_groups:
        raise IndexError(f"group {j} out of range")
    single = PromptGroupSet(prompts.text[j:j + 1], prompts.visual[j:j + 1])
    probs = _forward(enc, single, x, classes).probs[0]
    return probs[0] if np.ndim(x) == 1 else probs


def _check_batch(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(X) != len(y):
        raise ValueError("inputs and labels differ in length")
    return X, y


def ce_loss(enc: FrozenEncoders, prompts: PromptGroupSet, X, y, classes=None) -> float:
    """Cross-entropy averaged over groups and over the batch."""
    X, y = _check_batch(X, y)
    fw = _forward(enc, prompts, X, classes)
    idx = _label_index(fw.classes, y)
    picked = fw.probs[:, np.arange(len(y)), idx]
    return float(-np.mean(np.log(picked)))


def _pair_terms(feats: np.ndarray, form: str, literal: bool):
    """Diversity value and its gradient w.r.t. unit features ``feats`` of shape (G, M, d_f).

    Sums over the M axis (classes or samples); callers rescale for batch means.
    """
    G = feats.shape[0]
    total = feats.sum(axis=0)
    if literal:
        gram = np.einsum("gmf,hmf->gh", feats, feats)
        off = gram.sum() - np.trace(gram)
        value = G * (G - 1) * feats.shape[1] - off
        grad = -2.0 * (total[None] - feats)
        return value, grad
    norm = 1.0 / (G * (G - 1))
    if form == "cos":
        gram = np.einsum("gmf,hmf->gh", feats, feats)
        value = norm * (gram.sum() - np.trace(gram))
        grad = 2.0 * norm * (total[None] - feats)
    elif form == "l2":
        diff = feats[:, None] - feats[None, :]
        value = -norm * np.sum(diff**2)
        grad = -4.0 * norm * (G * feats - total[None])
    elif form == "l1":
        diff = feats[:, None] - feats[None, :]
        value = -norm * np.sum(np.abs(diff))
        grad = -2.0 * norm * np.sign(diff).sum(axis=1)
    else:
        raise ValueError(f"unknown diversity form {form!r}")
    return value, grad


def _diversity(fw: _Forward, form: str, literal: bool):
    G, B = fw.F.shape[:2]
    if G < 2:
        return 0.0, np.zeros_like(fw.T), np.zeros_like(fw.F)
    v_t, g_t = _pair_terms(fw.T, form, literal)
    v_f, g_f = _pair_terms(fw.F, form, literal)
    return v_t + v_f / B, g_t, g_f / B


def diversity_loss(enc, prompts, X, form: str = "cos", classes=None, literal_eq4: bool = False) -> float:
    """Pairwise group-diversity penalty over text and image features.

    ``cos`` (default) is the mean over ordered group pairs of summed class-wise
    text cosines plus the batch-mean image cosine, so minimizing it pushes the
    groups apart. ``l2``/``l1`` use negative pairwise distances instead.
    ``literal_eq4`` returns the sum over ordered pairs of ``1 - cos``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) == 0:
        raise ValueError("empty batch")
    if form not in DIVERSITY_FORMS:
        raise ValueError(f"unknown diversity form {form!r}")
    return float(_diversity(_forward(enc, prompts, X, classes), form, literal_eq4)[0])


def loss_and_gradient(
    enc: FrozenEncoders,
    prompts: PromptGroupSet,
    X,
    y,
    lam: float,
    form: str = "cos",
    classes=None,
    literal_eq4: bool = False,
) -> tuple[LossBreakdown, PromptGradients]:
    """Total loss ``ce + lam * div`` and its exact gradient w.r.t. every prompt vector."""
    X, y = _check_batch(X, y)
    if form not in DIVERSITY_FORMS:
        raise ValueError(f"unknown diversity form {form!r}")
    fw = _forward(enc, prompts, X, classes)
    G, B, _ = fw.probs.shape
    idx = _label_index(fw.classes, y)

    picked = fw.probs[:, np.arange(B), idx]
    ce = float(-np.mean(np.log(picked)))
    d_logits = fw.probs.copy()
    d_logits[:, np.arange(B), idx] -= 1.0
    d_logits /= G * B * enc.model_temperature
    dF = np.einsum("gbk,gkf->gbf", d_logits, fw.T)
    dT = np.einsum("gbk,gbf->gkf", d_logits, fw.F)

    div = 0.0
    if lam != 0.0:
        div, g_t, g_f = _diversity(fw, form, literal_eq4)
        dT = dT + lam * g_t
        dF = dF + lam * g_f

    dH = _normalize_backward(dT, fw.T, fw.t_norm)  # (G, K', d_f)
    dZ = _normalize_backward(dF, fw.F, fw.f_norm)  # (G, B, d_f)
    grad_text = (dH.sum(axis=1) @ enc.text_map) @ enc.text_prompt_inject
    grad_vis = (dZ.sum(axis=1) @ enc.image_map) @ enc.visual_prompt_inject
    loss = LossBreakdown(ce=ce, div=float(div), total=ce + lam * float(div), lam=lam)
    return loss, PromptGradients(grad_text, grad_vis)


def local_update(
    prompts: PromptGroupSet,
    enc: FrozenEncoders,
    dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    lam: float,
    form: str,
    rng: np.random.Generator,
    literal_eq4: bool = False,
) -> tuple[PromptGroupSet, list[LossBreakdown]]:
    """Mini-batch gradient descent on one client's data.

    Returns the new prompts and the per-epoch mean losses (measured during the
    epoch, before each step). The input prompts are not modified.
    """
    if len(dataset) == 0:
        raise ValueError(f"client {dataset.client_id} has no training data")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    out = prompts.copy()
    history = []
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        ce_sum = div_sum = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            loss, grads = loss_and_gradient(
                enc, out, dataset.X[batch], dataset.y[batch], lam, form, dataset.classes, literal_eq4
            )
            if lr != 0.0:
                out.text -= lr * grads.text
                out.visual -= lr * grads.visual
            ce_sum += loss.ce
            div_sum += loss.div
            n_batches += 1
        ce_m, div_m = ce_sum / n_batches, div_sum / n_batches
        history.append(LossBreakdown(ce_m, div_m, ce_m + lam * div_m, lam))
    return out, history


def ensemble_predict(
    enc: FrozenEncoders,
    prompts: PromptGroupSet,
    X,
    strategy: str = "average_probs",
    group: int | None = None,
    classes=None,
) -> np.ndarray:
    """Combine the groups' predictions; returns probabilities of shape (B, K') (or (K',) for one input)."""
    single = np.ndim(X) == 1
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if strategy.startswith("single_group:"):
        strategy, group = "single_group", int(strategy.split(":", 1)[1])
    if strategy not in INFERENCE_STRATEGIES:
        raise ValueError(f"unknown inference strategy {strategy!r}")
    if strategy == "single_group":
        if group is None or not 0 <= group < prompts.n_groups:
            raise IndexError(f"invalid group index {group}")
        prompts = PromptGroupSet(prompts.text[group:group + 1], prompts.visual[group:group + 1])
    fw = _forward(enc, prompts, X, classes)
    if strategy in ("average_probs", "single_group"):
        out = fw.probs.mean(axis=0)
    elif strategy == "max_logits":
        out = _softmax(fw.logits.max(axis=0))
    else:
        T = _normalize(fw.T.mean(axis=0))[0]
        F = _normalize(fw.F.mean(axis=0))[0]
        out = _softmax(F @ T.T / enc.model_temperature)
    return out[0] if single else out
