"""Toy single-layer attention lab for shared vs instance-adaptive prompts.

A frozen layer maps an input ``X`` (s x d) and a prompt ``P`` (p x d) to
``A(X, P) = softmax([X; P] W_q ([X; P] W_k)^T / sqrt(d))``. The discrepancy of
a prompt on an instance is the squared Frobenius distance between the rows of
``A`` that belong to ``X`` and a row-stochastic target. Prompt "optima" are
found by batched Adam with restarts, so every verdict here holds up to the
optimisation tolerance rather than as a proof.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .router import mix
from .tensor import Tensor

TOL = 1e-6
GRAD_TOL = 1e-2


@dataclass
class ToyAttentionLayer:
    wq: np.ndarray
    wk: np.ndarray

    @property
    def d(self) -> int:
        return self.wq.shape[0]


def toy_layer(d: int, rng: np.random.Generator) -> ToyAttentionLayer:
    return ToyAttentionLayer(rng.standard_normal((d, d)) / np.sqrt(d), rng.standard_normal((d, d)) / np.sqrt(d))


def attention_map(x, prompt, layer: ToyAttentionLayer) -> Tensor:
    """Full (s+p) x (s+p) attention over ``[X; P]``; leading batch dims allowed."""
    x = T.as_tensor(x)
    parts = [x]
    if prompt is not None:
        prompt = T.as_tensor(prompt)
        if prompt.shape[-1] != x.shape[-1]:
            raise DimensionError(f"prompt dim {prompt.shape[-1]} != input dim {x.shape[-1]}")
        if prompt.shape[-2] > 0:
            parts.append(prompt)
    if x.shape[-1] != layer.d:
        raise DimensionError(f"input dim {x.shape[-1]} != layer dim {layer.d}")
    seq = T.concat(parts, axis=-2)
    logits = T.matmul(seq @ layer.wq, T.transpose(seq @ layer.wk, _swap_last(seq.ndim)))
    return T.softmax_rows(logits * (1.0 / np.sqrt(layer.d)))


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def discrepancy(x, prompt, target, layer: ToyAttentionLayer) -> float:
    """Squared Frobenius distance on the input (non-prompt) query rows."""
    x = np.asarray(x, dtype=np.float64)
    a = attention_map(x, prompt, layer).data[: x.shape[0]]
    target = np.asarray(target)
    if target.shape != a.shape:
        raise DimensionError(f"target shape {target.shape} != attention rows {a.shape}")
    return float(((a - target) ** 2).sum())


# batched optimisation ------------------------------------------------------------


@dataclass
class _Problem:
    """N independent fits, each over n instances sharing one free prompt.

    x: (N, n, s, d); targets: (N, n, s, s+p); wq, wk: (N, d, d).
    """

    x: np.ndarray
    targets: np.ndarray
    wq: np.ndarray
    wk: np.ndarray


def _batched_loss(prob: _Problem, prompt: Tensor, p: int):
    """Per-(trial, restart, instance) discrepancy for prompt (N, R, p, d)."""
    n_trial, n, s, d = prob.x.shape
    r = prompt.shape[1]
    x = np.broadcast_to(prob.x[:, None], (n_trial, r, n, s, d))
    pr = T.broadcast_to(T.reshape(prompt, (n_trial, r, 1, p, d)), (n_trial, r, n, p, d))
    seq = T.concat([Tensor(x), pr], axis=3)
    qx = x @ prob.wq[:, None, None]
    keys = seq @ prob.wk[:, None, None]
    logits = T.matmul(Tensor(qx), T.transpose(keys, (0, 1, 2, 4, 3))) * (1.0 / np.sqrt(d))
    a = T.softmax_rows(logits)
    diff = a - prob.targets[:, None]
    return T.tsum(T.tsum(diff * diff, axis=-1), axis=-1)  # (N, R, n)


def _adam_fit(prob: _Problem, init: np.ndarray, steps: int, lr: float, param_fn=None):
    """Minimise the summed discrepancy from ``init`` (N, R, ...) with Adam.

    ``param_fn`` maps the free tensor to the prompt (N, R, p, d); identity by
    default. Keeps the best iterate per (trial, restart); returns
    ``(best_free, best_per_instance (N, R, n), grad_norm (N, R))``.
    """
    p = prob.targets.shape[-1] - prob.x.shape[-2]
    free = Tensor(init.copy(), requires_grad=True)
    m = np.zeros_like(init)
    v = np.zeros_like(init)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = free.data.copy()
    best_inst = None
    best_tot = np.full(init.shape[:2], np.inf)
    best_gn = np.full(init.shape[:2], np.inf)
    axes = tuple(range(2, init.ndim))
    for t in range(1, steps + 2):
        with T.Tape() as tape:
            prompt = free if param_fn is None else param_fn(free)
            per = _batched_loss(prob, prompt, p)
            # mean over instances: same minimiser as the sum, and a shared fit
            # over identical instances follows the single-instance trajectory
            loss = T.tsum(per) * (1.0 / per.shape[-1])
        g = T.backward(loss, tape)[free]
        tot = per.data.sum(axis=-1)
        gn = np.sqrt((g * g).sum(axis=axes))
        better = tot < best_tot
        if best_inst is None:
            best_inst = per.data.copy()
        best[better] = free.data[better]
        best_inst[better] = per.data[better]
        best_gn[better] = gn[better]
        best_tot = np.where(better, tot, best_tot)
        if t > steps:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        free.data = free.data - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return best, best_inst, best_gn


@dataclass
class FitResult:
    prompt: np.ndarray  # (p, d)
    deltas: list[float]  # per instance
    grad_norm: float
    steps: int
    restarts: int
    converged: bool


def _pick(best, inst, gn):
    """Best restart per trial."""
    idx = inst.sum(axis=-1).argmin(axis=1)
    rows = np.arange(best.shape[0])
    return best[rows, idx], inst[rows, idx], gn[rows, idx]


def _init_prompts(rng, shape, scale=1.0):
    return rng.uniform(-scale, scale, shape)


def fit_prompt(
    instances,
    targets,
    layer: ToyAttentionLayer,
    p: int,
    steps: int = 2000,
    lr: float = 0.05,
    restarts: int = 5,
    seed: int = 0,
) -> FitResult:
    """Best-of-restarts prompt minimising the summed discrepancy over instances."""
    x = np.asarray(instances, dtype=np.float64)
    tg = np.asarray(targets, dtype=np.float64)
    if x.ndim == 2:
        x, tg = x[None], tg[None]
    if len(x) == 0 or len(x) != len(tg):
        raise ParameterError("fit_prompt needs matching, non-empty instance and target lists")
    if restarts < 1 or steps < 0 or p < 1:
        raise ParameterError("restarts and p must be >= 1, steps >= 0")
    s, d = x.shape[1:]
    if tg.shape[1:] != (s, s + p):
        raise DimensionError(f"targets must have shape (s, s+p) = {(s, s + p)}, got {tg.shape[1:]}")
    init = _init_prompts(T.make_rng(seed), (1, restarts, p, d))
    prob = _Problem(x[None], tg[None], layer.wq[None], layer.wk[None])
    best, inst, gn = _pick(*_adam_fit(prob, init, steps, lr))
    return FitResult(best[0], inst[0].tolist(), float(gn[0]), steps, init.shape[1], bool(gn[0] <= GRAD_TOL or inst[0].sum() <= TOL))


# targets -------------------------------------------------------------------------


def disjoint_targets(rng: np.random.Generator, s: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Two row-stochastic (s, s+p) targets whose supports are disjoint column sets."""
    cols = rng.permutation(s + p)
    half = (s + p) // 2
    out = []
    for support in (cols[:half], cols[half:]):
        t = np.zeros((s, s + p))
        t[:, support] = rng.dirichlet(np.ones(len(support)), size=s)
        out.append(t)
    return out[0], out[1]


# demos ---------------------------------------------------------------------------


@dataclass
class DemoSettings:
    trials: int = 100
    d: int = 8
    s: int = 4
    p: int = 2
    steps: int = 2000
    lr: float = 0.05
    restarts: int = 5
    seed: int = 0


@dataclass
class DiscrepancyReport:
    demo: str
    settings: dict
    trials: list[dict] = field(default_factory=list)

    @property
    def valid(self) -> list[dict]:
        return [t for t in self.trials if t["valid"]]

    @property
    def pass_rate(self) -> float:
        v = self.valid
        return sum(t["holds"] for t in v) / len(v) if v else 0.0

    def summary(self) -> dict:
        v = self.valid
        return {
            "trials": len(self.trials),
            "valid": len(v),
            "invalid": len(self.trials) - len(v),
            "passed": sum(t["holds"] for t in v),
            "pass_rate": self.pass_rate,
        }

    def to_dict(self) -> dict:
        return {"demo": self.demo, "settings": self.settings, "summary": self.summary(), "trials": self.trials}


def _trial_layers(rng, n, d):
    wq = rng.standard_normal((n, d, d)) / np.sqrt(d)
    wk = rng.standard_normal((n, d, d)) / np.sqrt(d)
    return wq, wk


def _converged(inst_sum, gn):
    return (gn <= GRAD_TOL) | (inst_sum <= TOL)


def theorem1_demo(cfg: DemoSettings, identical: bool = False) -> DiscrepancyReport:
    """Shared prompt vs per-instance optima on pairs with disjoint target supports.

    Each trial fits ``P*_shared`` on both instances and ``P*_1``, ``P*_2``
    separately from the same restart draws. The shared optimum is also scored
    as a candidate for each individual problem, since it is a feasible point
    there. ``identical=True`` is the control where both instances and targets
    coincide.
    """
    n, s, p, d = cfg.trials, cfg.s, cfg.p, cfg.d
    rng = T.make_rng(cfg.seed)
    wq, wk = _trial_layers(rng, n, d)
    x = rng.standard_normal((n, 2, s, d))
    tg = np.zeros((n, 2, s, s + p))
    for i in range(n):
        tg[i, 0], tg[i, 1] = disjoint_targets(rng, s, p)
    if identical:
        x[:, 1] = x[:, 0]
        tg[:, 1] = tg[:, 0]
    init = _init_prompts(rng, (n, cfg.restarts, p, d))

    shared = _Problem(x, tg, wq, wk)
    ps, inst_s, gn_s = _pick(*_adam_fit(shared, init, cfg.steps, cfg.lr))
    # individual problems: 2n fits of one instance each
    single = _Problem(x.reshape(2 * n, 1, s, d), tg.reshape(2 * n, 1, s, s + p), np.repeat(wq, 2, 0), np.repeat(wk, 2, 0))
    _, inst_i, gn_i = _pick(*_adam_fit(single, np.repeat(init, 2, 0), cfg.steps, cfg.lr))
    inst_i = np.minimum(inst_i.reshape(n, 2), inst_s)
    gn_i = gn_i.reshape(n, 2)

    report = DiscrepancyReport("theorem1_identical" if identical else "theorem1", _settings(cfg))
    for i in range(n):
        lhs = float(inst_s[i].sum())
        rhs = float(inst_i[i].sum())
        valid = bool(_converged(lhs, gn_s[i]) and all(_converged(inst_i[i, j], gn_i[i, j]) for j in range(2)))
        report.trials.append({
            "trial": i,
            "delta_shared": [float(v) for v in inst_s[i]],
            "delta_instance": [float(v) for v in inst_i[i]],
            "gap": lhs - rhs,
            "holds": bool(lhs >= rhs - TOL),
            "valid": valid,
            "steps": cfg.steps,
            "grad_norm": [float(gn_s[i]), float(gn_i[i, 0]), float(gn_i[i, 1])],
        })
    return report


def _settings(cfg: DemoSettings) -> dict:
    out = dict(cfg.__dict__)
    out["tol"] = TOL
    out["grad_tol"] = GRAD_TOL
    return out


def theorem2_demo(cfg: DemoSettings, n_instances: int, k: int) -> DiscrepancyReport:
    """MoPE (k experts + per-instance routing) vs one shared prompt over n instances.

    ``n <= k``: the experts store the per-instance optima and routing is
    one-hot, so MoPE reproduces the instance-optimal sum. ``n > k``: targets
    are generated by random convex combinations of k random experts, and MoPE
    fits a routing-logit table over those experts. ``k = 1`` degenerates to the
    shared prompt itself.
    """
    if n_instances < 1 or k < 1:
        raise ParameterError("theorem2_demo needs n, k >= 1")
    trials, s, p, d, n = cfg.trials, cfg.s, cfg.p, cfg.d, n_instances
    rng = T.make_rng(cfg.seed)
    wq, wk = _trial_layers(rng, trials, d)
    x = rng.standard_normal((trials, n, s, d))
    experts = alphas = None
    if n <= k or k == 1:
        tg = np.zeros((trials, n, s, s + p))
        for t in range(trials):
            for i in range(0, n, 2):
                a, b = disjoint_targets(rng, s, p)
                tg[t, i] = a
                if i + 1 < n:
                    tg[t, i + 1] = b
    else:
        experts = rng.uniform(-1.0, 1.0, (trials, k, p, d))
        alphas = rng.dirichlet(np.ones(k), size=(trials, n))
        mixed = np.einsum("tnk,tkpd->tnpd", alphas, experts)
        tg = np.stack([_target_from_prompt(x[t], mixed[t], wq[t], wk[t]) for t in range(trials)])
    init = _init_prompts(rng, (trials, cfg.restarts, p, d))

    shared = _Problem(x, tg, wq, wk)
    ps, inst_s, gn_s = _pick(*_adam_fit(shared, init, cfg.steps, cfg.lr))

    report = DiscrepancyReport(f"theorem2_n{n}_k{k}", {**_settings(cfg), "n": n, "k": k})
    if k == 1:
        # a single expert with routing [1] is the shared prompt
        mope_inst = np.stack([
            [discrepancy(x[t, i], mix(np.ones((1, 1)), ps[t][None]).data[0], tg[t, i], ToyAttentionLayer(wq[t], wk[t])) for i in range(n)]
            for t in range(trials)
        ])
        gn_m = gn_s
        ref = inst_s
    elif n <= k:
        single = _Problem(x.reshape(trials * n, 1, s, d), tg.reshape(trials * n, 1, s, s + p), np.repeat(wq, n, 0), np.repeat(wk, n, 0))
        p_opt, inst_i, gn_i = _pick(*_adam_fit(single, np.repeat(init, n, 0), cfg.steps, cfg.lr))
        p_opt = p_opt.reshape(trials, n, p, d)
        ref = inst_i.reshape(trials, n)
        use_shared = inst_s < ref  # the shared optimum is a candidate too
        p_opt = np.where(use_shared[..., None, None], ps[:, None], p_opt)
        ref = np.minimum(ref, inst_s)
        gn_m = gn_i.reshape(trials, n).max(axis=1)
        mope_inst = np.zeros((trials, n))
        for t in range(trials):
            ex = np.concatenate([p_opt[t], rng.uniform(-1.0, 1.0, (k - n, p, d))]) if k > n else p_opt[t]
            onehot = np.eye(k)[:n]
            prompts = mix(onehot, ex).data
            layer = ToyAttentionLayer(wq[t], wk[t])
            mope_inst[t] = [discrepancy(x[t, i], prompts[i], tg[t, i], layer) for i in range(n)]
    else:
        prob = _Problem(x.reshape(trials * n, 1, s, d), tg.reshape(trials * n, 1, s, s + p), np.repeat(wq, n, 0), np.repeat(wk, n, 0))
        ex = Tensor(np.repeat(experts, n, 0))  # (trials*n, k, p, d)

        def to_prompt(logits: Tensor) -> Tensor:
            r = T.softmax_rows(logits)  # (trials*n, 1, k)
            b = logits.shape[0]
            return T.reshape(T.tsum(T.reshape(r, (b, k, 1, 1)) * ex, axis=1), (b, 1, p, d))

        _, inst_m, gn = _adam_fit(prob, np.zeros((trials * n, 1, k)), cfg.steps, cfg.lr, to_prompt)
        mope_inst = inst_m[:, 0, 0].reshape(trials, n)
        gn_m = gn[:, 0].reshape(trials, n).max(axis=1)
        ref = None

    for t in range(trials):
        sh, mo = float(inst_s[t].sum()), float(mope_inst[t].sum())
        row = {
            "trial": t,
            "delta_shared": [float(v) for v in inst_s[t]],
            "delta_mope": [float(v) for v in mope_inst[t]],
            "steps": cfg.steps,
            "grad_norm": [float(gn_s[t]), float(gn_m[t])],
        }
        if ref is not None and k > 1:
            opt = float(ref[t].sum())
            row["delta_instance"] = [float(v) for v in ref[t]]
            row["gap"] = mo - opt
            row["holds"] = bool(abs(mo - opt) <= TOL)
            row["valid"] = bool(all(_converged(ref[t, i], gn_m[t]) for i in range(n)))
        elif k == 1:
            row["gap"] = mo - sh
            row["holds"] = bool(abs(mo - sh) <= 1e-9)
            row["valid"] = bool(_converged(sh, gn_s[t]))
        else:
            row["gap"] = sh - mo
            row["holds"] = bool(mo <= sh + TOL)
            row["valid"] = bool(_converged(sh, gn_s[t]) and _converged(mo, gn_m[t]))
        report.trials.append(row)
    return report


def _target_from_prompt(x, prompts, wq, wk):
    layer = ToyAttentionLayer(wq, wk)
    s = x.shape[1]
    return np.stack([attention_map(x[i], prompts[i], layer).data[:s] for i in range(len(x))])
