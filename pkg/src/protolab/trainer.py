"""Desk-scale student/teacher self-distillation with hand-written backprop.

The student is a small encoder (linear or one tanh hidden layer) whose
output is L2-normalized, followed by the prototype head.  The teacher is an
EMA copy.  Teacher targets are adjusted by centering or Sinkhorn-Knopp; the
student loss is symmetric cross-view cross-entropy plus optional ME-MAX,
KoLeo-proto and KoLeo-data terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from . import regularizers as reg
from .collapse import detect_partial_collapse
from .config import ExperimentConfig
from .data import SyntheticDataset, augment, generate_dataset
from .errors import NonFiniteLoss, ShapeMismatch
from .geometry import l2_normalize
from .head import HeadMode, PrototypeBank, TemperatureSchedule, dlog_vmf_norm_const, log_vmf_norm_const

PROB_CLAMP = 1e-30

Params = dict[str, np.ndarray]


# -- parameters ----------------------------------------------------------------


def init_params(cfg: ExperimentConfig, rng: np.random.Generator) -> Params:
    d_in, D, K = cfg.dataset.input_dim, cfg.head.dim, cfg.head.num_prototypes
    if cfg.encoder.kind == "mlp":
        H = cfg.encoder.hidden_dim
        params = {
            "W1": rng.standard_normal((d_in, H)) / math.sqrt(d_in),
            "b1": np.zeros(H),
            "W2": rng.standard_normal((H, D)) / math.sqrt(H),
            "b2": np.zeros(D),
        }
    else:
        params = {"W": rng.standard_normal((d_in, D)) / math.sqrt(d_in), "b": np.zeros(D)}
    params["protos"] = l2_normalize(rng.standard_normal((K, D)))
    if cfg.encoder.init_bias > 0:
        out_bias = "b2" if "b2" in params else "b"
        params[out_bias] = cfg.encoder.init_bias * l2_normalize(rng.standard_normal(D))
    return params


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def ema_update(teacher: Params, student: Params, momentum: float) -> Params:
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    if teacher.keys() != student.keys():
        raise ShapeMismatch("teacher and student parameter sets differ")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ShapeMismatch(f"{name}: {t.shape} vs {s.shape}")
        out[name] = momentum * t + (1.0 - momentum) * s
    return out


def make_bank(params: Params, cfg: ExperimentConfig, teacher_temp: float | None = None) -> PrototypeBank:
    t = cfg.temperature
    return PrototypeBank(
        params["protos"],
        mode=HeadMode(cfg.head.mode),
        kappa_scale=cfg.head.kappa_scale,
        student_temp=t.student,
        teacher_temp=t.teacher_end if teacher_temp is None else teacher_temp,
    )


# -- forward / backward ----------------------------------------------------------


def encode(params: Params, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Unit embeddings of ``x`` plus the cache needed for backprop."""
    if "W1" in params:
        h = np.tanh(x @ params["W1"] + params["b1"])
        z = h @ params["W2"] + params["b2"]
    else:
        h = None
        z = x @ params["W"] + params["b"]
    n = np.linalg.norm(z, axis=1, keepdims=True)
    return z / n, {"x": x, "h": h, "n": n}


def encode_backward(params: Params, y: np.ndarray, cache: dict, dy: np.ndarray, grads: Params) -> None:
    dz = (dy - np.sum(dy * y, axis=1, keepdims=True) * y) / cache["n"]
    x, h = cache["x"], cache["h"]
    if h is None:
        grads["W"] += x.T @ dz
        grads["b"] += dz.sum(axis=0)
        return
    grads["W2"] += h.T @ dz
    grads["b2"] += dz.sum(axis=0)
    da = (dz @ params["W2"].T) * (1.0 - h * h)
    grads["W1"] += x.T @ da
    grads["b1"] += da.sum(axis=0)


def proto_logits(protos: np.ndarray, y: np.ndarray, temp: float, mode: HeadMode, scale: float) -> np.ndarray:
    norms = np.linalg.norm(protos, axis=1)
    if mode is HeadMode.PLAIN:
        return (y @ (protos / norms[:, None]).T) / temp
    kap = scale * norms / temp
    return (scale / temp) * (y @ protos.T) + log_vmf_norm_const(kap, protos.shape[1])


def proto_logits_backward(protos, y, temp, mode, scale, G):
    """Gradients w.r.t. ``y`` and w.r.t. the unit directions / raw weights.

    Returns ``(dy, dmu, dw)``: ``dmu`` still has to be pushed through the
    normalization Jacobian, ``dw`` is already a raw-weight gradient.
    """
    norms = np.linalg.norm(protos, axis=1)
    mu = protos / norms[:, None]
    if mode is HeadMode.PLAIN:
        return (G @ mu) / temp, (G.T @ y) / temp, np.zeros_like(protos)
    kap = scale * norms / temp
    dy = (scale / temp) * (G @ protos)
    dw = (scale / temp) * (G.T @ y)
    dw += (G.sum(axis=0) * dlog_vmf_norm_const(kap, protos.shape[1]) * scale / temp)[:, None] * mu
    return dy, np.zeros_like(protos), dw


def teacher_targets(
    teacher_logits: np.ndarray, center: reg.CenterState | None, cfg: ExperimentConfig
) -> np.ndarray:
    """Adjusted teacher distributions for the stacked views (2B x K)."""
    m = cfg.mlcd
    if m.sinkhorn_iters > 0:
        return reg.sinkhorn_adjust(teacher_logits, m.sinkhorn_iters)
    if center is not None:
        return reg.apply_center(center, teacher_logits)
    return np.exp(log_softmax(teacher_logits, axis=1))


def distill_loss(teacher_dist, student_dist) -> float:
    """Mean over rows of H(teacher, student); student probabilities clamped at 1e-30."""
    t = np.asarray(teacher_dist, dtype=np.float64)
    s = np.asarray(student_dist, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeMismatch(f"teacher {t.shape} vs student {s.shape}")
    return float(-np.sum(t * np.log(np.maximum(s, PROB_CLAMP))) / t.shape[0])


def cross_view_distill_loss(t1, t2, s1, s2) -> float:
    """Symmetrized pairing: view-1 teacher supervises view-2 student and vice versa."""
    return 0.5 * (distill_loss(t1, s2) + distill_loss(t2, s1))


@dataclass
class LossParts:
    total: float
    distill: float
    koleo: float = 0.0
    me_max: float = 0.0
    mlcd_entropy: float = 0.0
    kl_to_prior: float = 0.0


def loss_and_grad(
    params: Params,
    x1: np.ndarray,
    x2: np.ndarray,
    t1: np.ndarray,
    t2: np.ndarray,
    cfg: ExperimentConfig,
    koleo_seed: int = 0,
    need_grad: bool = True,
):
    """Student loss for views ``x1``/``x2`` against fixed teacher targets.

    ``t1`` are the teacher targets computed from view 1 (supervising the
    student on view 2) and vice versa.  Returns ``(parts, grads, ties)``
    where ``ties`` lists the KoLeo-proto rows involved in nearest-neighbour
    ties and a flag for ties among embeddings.
    """
    mode = HeadMode(cfg.head.mode)
    scale, tau = cfg.head.kappa_scale, cfg.temperature.student
    protos = params["protos"]
    B = x1.shape[0]

    y1, c1 = encode(params, x1)
    y2, c2 = encode(params, x2)
    y = np.vstack([y1, y2])
    logits = proto_logits(protos, y, tau, mode, scale)
    logp = log_softmax(logits, axis=1)
    s = np.exp(logp)
    targets = np.vstack([t2, t1])  # row b of view 1 is supervised by the other view's teacher
    distill = float(-np.sum(targets * logp) / (2 * B))
    G = (s - targets) / (2 * B)

    prior = reg.PriorDistribution(cfg.mlcd.prior, protos.shape[0], cfg.mlcd.prior_alpha)
    pbar = s.mean(axis=0)
    kl = reg.me_max_penalty(pbar, prior)
    ent = float(-np.sum(pbar * np.log(np.maximum(pbar, PROB_CLAMP))))
    total = distill
    if cfg.mlcd.me_max_weight > 0:
        total += cfg.mlcd.me_max_weight * kl
        g = cfg.mlcd.me_max_weight * reg.me_max_grad(pbar, prior) / (2 * B)
        G = G + s * (g[None, :] - (s @ g)[:, None])

    koleo_val = 0.0
    dmu_extra = None
    dy_extra = None
    proto_ties = np.zeros(0, dtype=int)
    data_tie = False
    kind, lam = cfg.koleo.kind, cfg.koleo.weight
    if kind == "proto":
        mu = l2_normalize(protos)
        koleo_val, gk, proto_ties = reg.koleo_batched_value_and_grad(mu, cfg.koleo.partition_size, koleo_seed)
        total += lam * koleo_val
        dmu_extra = lam * gk
    elif kind == "data":
        v1, g1, tie1 = reg.koleo_value_and_grad(y1)
        v2, g2, tie2 = reg.koleo_value_and_grad(y2)
        koleo_val = 0.5 * (v1 + v2)
        total += lam * koleo_val
        dy_extra = 0.5 * lam * np.vstack([g1, g2])
        data_tie = bool(len(tie1) or len(tie2))

    parts = LossParts(total, distill, koleo_val, kl if cfg.mlcd.me_max_weight > 0 else 0.0, ent, kl)
    if not need_grad:
        return parts, None, (proto_ties, data_tie)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dy, dmu, dw = proto_logits_backward(protos, y, tau, mode, scale, G)
    if dy_extra is not None:
        dy = dy + dy_extra
    if dmu_extra is not None:
        dmu = dmu + dmu_extra
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    mu = protos / norms
    grads["protos"] = dw + (dmu - np.sum(dmu * mu, axis=1, keepdims=True) * mu) / norms
    encode_backward(params, y1, c1, dy[:B], grads)
    encode_backward(params, y2, c2, dy[B:], grads)
    return parts, grads, (proto_ties, data_tie)


# -- schedules ---------------------------------------------------------------------


def lr_at(cfg: ExperimentConfig, step: int) -> float:
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    o = cfg.optim
    warm = int(round(o.warmup_frac * o.steps))
    if step < warm:
        return o.lr * (step + 1) / warm
    span = max(o.steps - warm, 1)
    return o.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def ema_momentum_at(cfg: ExperimentConfig, step: int) -> float:
    o = cfg.optim
    frac = step / max(o.steps - 1, 1)
    return o.ema_end - (o.ema_end - o.ema_start) * (math.cos(math.pi * frac) + 1.0) / 2.0


def temperature_schedule(cfg: ExperimentConfig) -> TemperatureSchedule:
    t = cfg.temperature
    return TemperatureSchedule(
        t.teacher_start, t.teacher_end, int(round(t.warmup_frac * cfg.optim.steps)), t.student
    )


# -- training state ------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    total_loss: float
    distill_loss: float
    koleo_value: float
    me_max_value: float
    mlcd_entropy: float
    kl_to_prior: float
    unique_M: int
    lr: float
    teacher_temp: float

    FIELDS = (
        "step", "total_loss", "distill_loss", "koleo_value", "me_max_value",
        "mlcd_entropy", "kl_to_prior", "unique_M", "lr", "teacher_temp",
    )

    def row(self) -> list[str]:
        out = []
        for name in self.FIELDS:
            v = getattr(self, name)
            out.append(str(v) if isinstance(v, int) else repr(float(v)))
        return out


@dataclass
class TrainState:
    student: Params
    teacher: Params
    velocity: Params
    second_moment: Params
    center: reg.CenterState | None
    rng: np.random.Generator
    seed: int
    step: int = 0
    last_unique_M: int = 0
    history: list[StepMetrics] = field(default_factory=list)


def init_state(cfg: ExperimentConfig) -> TrainState:
    rng = np.random.default_rng(cfg.run.seed)
    student = init_params(cfg, rng)
    K = cfg.head.num_prototypes
    center = None
    if cfg.mlcd.center != "none":
        center = reg.CenterState.initial(K, cfg.mlcd.center_momentum, cfg.mlcd.center)
    velocity = {k: np.zeros_like(v) for k, v in student.items()}
    second = {k: np.zeros_like(v) for k, v in student.items()}
    return TrainState(student, copy_params(student), velocity, second, center, rng, cfg.run.seed)


def make_views(state: TrainState, points: np.ndarray, cfg: ExperimentConfig):
    sigma = cfg.optim.augment_sigma
    return augment(points, sigma, state.rng), augment(points, sigma, state.rng)


def compute_targets(state: TrainState, x1, x2, cfg: ExperimentConfig, teacher_temp: float):
    """Teacher targets for both views and the raw teacher logits used for the center update."""
    mode = HeadMode(cfg.head.mode)
    ty1, _ = encode(state.teacher, x1)
    ty2, _ = encode(state.teacher, x2)
    tl = proto_logits(state.teacher["protos"], np.vstack([ty1, ty2]), teacher_temp, mode, cfg.head.kappa_scale)
    t = teacher_targets(tl, state.center, cfg)
    B = x1.shape[0]
    return t[:B], t[B:], tl


def koleo_seed_for(state: TrainState) -> int:
    return int(np.random.SeedSequence([state.seed, state.step]).generate_state(1)[0])


def train_step(state: TrainState, points: np.ndarray, cfg: ExperimentConfig) -> StepMetrics:
    """One optimization step on a batch of raw input points (mutates ``state``)."""
    step = state.step
    tau_t = temperature_schedule(cfg).teacher_temp(step)
    x1, x2 = make_views(state, points, cfg)
    t1, t2, teacher_logits = compute_targets(state, x1, x2, cfg, tau_t)

    parts, grads, _ = loss_and_grad(state.student, x1, x2, t1, t2, cfg, koleo_seed_for(state))
    if not np.isfinite(parts.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLoss(f"non-finite loss at step {step + 1}: {parts}")

    lr = lr_at(cfg, step)
    optimizer_update(state, grads, lr, cfg)

    state.teacher = ema_update(state.teacher, state.student, ema_momentum_at(cfg, step))
    if state.center is not None:
        state.center = reg.center_update(state.center, teacher_logits)

    state.step += 1
    n = state.step
    if n == 1 or n % cfg.run.unique_every == 0 or n == cfg.optim.steps:
        state.last_unique_M = detect_partial_collapse(l2_normalize(state.student["protos"]), cfg.run.epsilon).M
    metrics = StepMetrics(
        step=n,
        total_loss=parts.total,
        distill_loss=parts.distill,
        koleo_value=parts.koleo,
        me_max_value=parts.me_max,
        mlcd_entropy=parts.mlcd_entropy,
        kl_to_prior=parts.kl_to_prior,
        unique_M=state.last_unique_M,
        lr=lr,
        teacher_temp=tau_t,
    )
    state.history.append(metrics)
    return metrics


def optimizer_update(state: TrainState, grads: Params, lr: float, cfg: ExperimentConfig) -> None:
    """SGD with heavy-ball momentum, or Adam with bias correction."""
    o = cfg.optim
    if o.optimizer == "sgd":
        for name, g in grads.items():
            v = state.velocity[name]
            v *= o.momentum
            v += g
            state.student[name] = state.student[name] - lr * v
        return
    t = state.step + 1
    b1, b2 = o.momentum, o.adam_beta2
    for name, g in grads.items():
        m, v = state.velocity[name], state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        state.student[name] = state.student[name] - lr * m_hat / (np.sqrt(v_hat) + o.adam_eps)


def sample_batch(state: TrainState, data: SyntheticDataset, batch_size: int) -> np.ndarray:
    idx = state.rng.choice(len(data.points), size=batch_size, replace=False)
    return data.points[idx]


def make_dataset(cfg: ExperimentConfig) -> SyntheticDataset:
    d = cfg.dataset
    return generate_dataset(
        d.num_clusters, d.num_points, d.input_dim, d.cluster_kappa, d.mixing, cfg.run.seed, d.mixing_alpha
    )


def train(cfg: ExperimentConfig, data: SyntheticDataset | None = None, callback=None):
    """Run the configured number of steps; returns ``(state, data)``."""
    data = make_dataset(cfg) if data is None else data
    state = init_state(cfg)
    for _ in range(cfg.optim.steps):
        metrics = train_step(state, sample_batch(state, data, cfg.optim.batch_size), cfg)
        if callback is not None:
            callback(metrics)
    return state, data


# -- gradient check --------------------------------------------------------------------


@dataclass
class GradCheck:
    max_rel_error: float
    tie_detected: bool
    excluded: int


def finite_diff_check(
    state: TrainState, points: np.ndarray, cfg: ExperimentConfig, h: float = 1e-5, order: int = 2
) -> GradCheck:
    """Compare analytic student gradients with central differences.

    Views, teacher targets and the KoLeo partition are frozen first so the
    loss is a deterministic function of the student parameters.  Prototype
    rows tied for a nearest neighbour are excluded; a tie among embeddings
    excludes the encoder parameters.  ``order`` selects the 3-point (2) or
    5-point (4) central stencil.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    tau_t = temperature_schedule(cfg).teacher_temp(state.step)
    x1, x2 = make_views(state, points, cfg)
    t1, t2, _ = compute_targets(state, x1, x2, cfg, tau_t)
    seed = koleo_seed_for(state)
    params = copy_params(state.student)
    _, grads, (proto_ties, data_tie) = loss_and_grad(params, x1, x2, t1, t2, cfg, seed)

    def loss() -> float:
        return loss_and_grad(params, x1, x2, t1, t2, cfg, seed, need_grad=False)[0].total

    worst, excluded = 0.0, 0
    for name, p in params.items():
        skip = np.zeros(p.shape, dtype=bool)
        if name == "protos":
            skip[proto_ties] = True
        elif data_tie:
            skip[...] = True
        for idx in np.ndindex(p.shape):
            if skip[idx]:
                excluded += 1
                continue
            orig = p[idx]
            f = {}
            for j in ((-1, 1) if order == 2 else (-2, -1, 1, 2)):
                p[idx] = orig + j * h
                f[j] = loss()
            p[idx] = orig
            if order == 2:
                num = (f[1] - f[-1]) / (2 * h)
            else:
                num = (8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h)
            ana = grads[name][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return GradCheck(worst, bool(len(proto_ties)) or data_tie, excluded)


# -- evaluation helpers ------------------------------------------------------------------


def embed_dataset(params: Params, points: np.ndarray) -> np.ndarray:
    return encode(params, points)[0]


def mean_pairwise_cosine_distance(y: np.ndarray) -> float:
    """Mean of ``1 - y_i . y_j`` over ordered pairs ``i != j`` of unit rows."""
    n = len(y)
    total = y.sum(axis=0)
    sum_dots = total @ total - n
    return float(1.0 - sum_dots / (n * (n - 1)))


def purity(embeddings: np.ndarray, reps: np.ndarray, labels: np.ndarray) -> float:
    """Share of points whose nearest representative's majority label is their own."""
    assign = np.argmax(embeddings @ reps.T, axis=1)
    hits = 0
    for m in np.unique(assign):
        lab = labels[assign == m]
        hits += np.bincount(lab).max()
    return hits / len(labels)
