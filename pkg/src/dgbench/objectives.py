"""Training objectives: ERM and eight domain-generalization methods.

Each objective is a callable ``objective(model, batches, step) -> (loss,
LossDiagnostics)`` where ``batches`` holds one equal-size
:class:`~dgbench.models.TensorSet` per training environment. The pure loss
functions (``erm_loss``, ``vrex_loss``, ...) are exposed separately so they
can be checked in isolation.

Concrete forms used:

* GroupDRO: exponentiated-gradient weights ``q_e <- q_e exp(eta_q R_e)``,
  renormalised, loss ``sum_e q_e R_e`` with the updated weights.
* IRM: IRMv1 penalty, squared derivative of the environment risk with
  respect to a scalar multiplier on the logits at 1, averaged over envs.
* VREx / RVP: population variance / standard deviation of the env risks.
* IGA: ``sum_e ||g_e - mean_g||^2`` over parameter gradients.
* CORAL: mean over environment pairs of the mean squared difference of
  feature means plus that of feature covariances (n - 1 normalisation).
* MLDG: one held-out meta-test environment per step (rotating),
  ``L_tr(theta) + gamma * L_te(theta - alpha grad L_tr)``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from .exceptions import ConfigurationError, NumericError

ALGORITHMS = ("ERM", "GroupDRO", "IRM", "VREx", "RVP", "IGA", "CORAL", "MLDG")
ORACLES = ("OracleID", "OracleMerged")


@dataclass
class LossDiagnostics:
    risks: list = field(default_factory=list)
    penalty: float = 0.0
    effective_lambda: float = 0.0
    scale: float = 1.0
    q: list | None = None
    total: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def bce_risk(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over examples and labels."""
    if y.ndim == 1:
        y = y[:, None]
    if logits.ndim == 1:
        logits = logits[:, None]
    return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype))


def _forward_all(model, batches):
    outs = []
    for b in batches:
        feats, logits = model(b.inputs)
        if not torch.isfinite(logits).all():
            raise NumericError(f"non-finite model output in environment {b.name!r}")
        outs.append((feats, logits))
    return outs


def env_risks(model, batches) -> torch.Tensor:
    """Empirical risk of ``model`` on each environment batch, shape (E,)."""
    if not batches:
        raise ConfigurationError("need at least one environment batch")
    outs = _forward_all(model, batches)
    return torch.stack([bce_risk(lg, b.y) for (_, lg), b in zip(outs, batches)])


def erm_loss(risks: torch.Tensor) -> torch.Tensor:
    return risks.mean()


def _population_variance(risks: torch.Tensor) -> torch.Tensor:
    return ((risks - risks.mean()) ** 2).mean()


def vrex_loss(risks: torch.Tensor, lam: float) -> torch.Tensor:
    return risks.mean() + lam * _population_variance(risks)


def rvp_loss(risks: torch.Tensor, lam: float) -> torch.Tensor:
    # clamp keeps the gradient finite when all risks coincide
    std = torch.sqrt(_population_variance(risks).clamp_min(1e-30))
    return risks.mean() + lam * std


def group_dro_loss(risks: torch.Tensor, q: torch.Tensor, eta: float
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (loss, updated q); the update does not carry gradients."""
    if not eta > 0:
        raise ConfigurationError(f"GroupDRO step size must be positive, got {eta}")
    # log-space update keeps large eta * risk finite
    logq = torch.log(q) + eta * risks.detach()
    q_new = torch.softmax(logq, dim=0)
    return (q_new * risks).sum(), q_new


def irm_penalty_from_logits(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    scale = torch.ones((), dtype=logits.dtype, requires_grad=True)
    risk = bce_risk(logits * scale, y)
    (grad,) = torch.autograd.grad(risk, [scale], create_graph=True)
    return grad ** 2


def irm_penalty(model, batch) -> torch.Tensor:
    _, logits = model(batch.inputs)
    return irm_penalty_from_logits(logits, batch.y)


def coral_penalty(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over environment pairs of mean/covariance mismatch."""
    stats = []
    for f in features:
        mean = f.mean(0, keepdim=True)
        cent = f - mean
        cov = cent.t() @ cent / max(len(f) - 1, 1)
        stats.append((mean, cov))
    pairs = [(i, j) for i in range(len(stats)) for j in range(i + 1, len(stats))]
    if not pairs:
        return features[0].new_zeros(())
    total = features[0].new_zeros(())
    for i, j in pairs:
        total = total + (stats[i][0] - stats[j][0]).pow(2).mean() \
            + (stats[i][1] - stats[j][1]).pow(2).mean()
    return total / len(pairs)


def iga_penalty(model, risks: torch.Tensor) -> torch.Tensor:
    params = [p for p in model.parameters() if p.requires_grad]
    grads = []
    for r in risks:
        g = torch.autograd.grad(r, params, create_graph=True, allow_unused=True)
        grads.append([torch.zeros_like(p) if gi is None else gi for gi, p in zip(g, params)])
    penalty = risks.new_zeros(())
    for k in range(len(params)):
        stacked = torch.stack([g[k] for g in grads])
        penalty = penalty + (stacked - stacked.mean(0)).pow(2).sum()
    return penalty


def anneal_lambda(lam: float, anneal_steps: int, step: int) -> tuple[float, float]:
    """Effective penalty weight and loss scale at ``step``.

    The weight is 1 before ``anneal_steps`` and ``lam`` afterwards; once the
    target weight is active and exceeds 1 the loss is divided by it.
    """
    if step < anneal_steps:
        return 1.0, 1.0
    return float(lam), (1.0 / lam if lam > 1.0 else 1.0)


class Objective:
    """Base class; subclasses implement :meth:`__call__`."""

    name = "base"
    hparam_names: tuple[str, ...] = ()

    def __init__(self, n_envs: int, **hparams):
        self.n_envs = int(n_envs)
        self.hparams = dict(hparams)

    def resets_optimizer(self, step: int) -> bool:
        return False

    def __call__(self, model, batches, step: int):
        raise NotImplementedError


class ERM(Objective):
    name = "ERM"

    def __call__(self, model, batches, step):
        risks = env_risks(model, batches)
        loss = erm_loss(risks)
        return loss, LossDiagnostics(risks.tolist(), total=float(loss.detach()))


class GroupDRO(Objective):
    name = "GroupDRO"
    hparam_names = ("groupdro_eta",)

    def __init__(self, n_envs, groupdro_eta: float = 1e-2, **kw):
        super().__init__(n_envs, groupdro_eta=groupdro_eta, **kw)
        if not groupdro_eta > 0:
            raise ConfigurationError(f"groupdro_eta must be positive, got {groupdro_eta}")
        self.eta = float(groupdro_eta)
        self.q = torch.full((self.n_envs,), 1.0 / self.n_envs, dtype=torch.float64)

    def __call__(self, model, batches, step):
        risks = env_risks(model, batches)
        loss, q = group_dro_loss(risks, self.q.to(risks.dtype), self.eta)
        self.q = q.detach().to(torch.float64)
        return loss, LossDiagnostics(risks.tolist(), q=self.q.tolist(),
                                     total=float(loss.detach()))


class _Penalized(Objective):
    hparam_names = ("lambda", "anneal_steps")

    def __init__(self, n_envs, penalty_weight: float = 1.0, anneal_steps: int = 0, **kw):
        super().__init__(n_envs, penalty_weight=penalty_weight, anneal_steps=anneal_steps, **kw)
        if not (penalty_weight >= 0 and math.isfinite(penalty_weight)):
            raise ConfigurationError(f"penalty weight must be finite and >= 0, got {penalty_weight}")
        self.lam = float(penalty_weight)
        self.anneal_steps = int(anneal_steps)

    def resets_optimizer(self, step):
        # Adam's moment estimates are stale once the penalty weight jumps
        return self.anneal_steps > 0 and step == self.anneal_steps and self.lam != 1.0

    def penalty(self, model, batches, risks, outs) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, model, batches, step):
        outs = _forward_all(model, batches)
        risks = torch.stack([bce_risk(lg, b.y) for (_, lg), b in zip(outs, batches)])
        lam, scale = anneal_lambda(self.lam, self.anneal_steps, step)
        if lam == 0.0:
            loss = erm_loss(risks)
            return loss, LossDiagnostics(risks.tolist(), 0.0, 0.0, 1.0,
                                         total=float(loss.detach()))
        pen = self.penalty(model, batches, risks, outs)
        loss = (erm_loss(risks) + lam * pen) * scale
        return loss, LossDiagnostics(risks.tolist(), float(pen.detach()), lam, scale,
                                     total=float(loss.detach()))


class IRM(_Penalized):
    name = "IRM"

    def penalty(self, model, batches, risks, outs):
        return torch.stack([irm_penalty_from_logits(lg, b.y)
                            for (_, lg), b in zip(outs, batches)]).mean()


class VREx(_Penalized):
    name = "VREx"

    def penalty(self, model, batches, risks, outs):
        return _population_variance(risks)


class RVP(_Penalized):
    name = "RVP"

    def penalty(self, model, batches, risks, outs):
        return torch.sqrt(_population_variance(risks).clamp_min(1e-30))


class IGA(_Penalized):
    name = "IGA"

    def penalty(self, model, batches, risks, outs):
        return iga_penalty(model, risks)


class CORAL(_Penalized):
    name = "CORAL"

    def penalty(self, model, batches, risks, outs):
        return coral_penalty([f for f, _ in outs])


class MLDG(Objective):
    """Meta-learning with one rotating held-out environment per step."""

    name = "MLDG"
    hparam_names = ("mldg_alpha", "mldg_gamma")

    def __init__(self, n_envs, mldg_alpha: float = 1e-2, mldg_gamma: float = 1.0,
                 second_order: bool = False, **kw):
        super().__init__(n_envs, mldg_alpha=mldg_alpha, mldg_gamma=mldg_gamma,
                         second_order=second_order, **kw)
        if self.n_envs < 2:
            raise ConfigurationError("MLDG needs at least two training environments")
        if mldg_alpha < 0 or mldg_gamma < 0:
            raise ConfigurationError("mldg_alpha and mldg_gamma must be non-negative")
        self.alpha = float(mldg_alpha)
        self.gamma = float(mldg_gamma)
        self.second_order = bool(second_order)

    def __call__(self, model, batches, step):
        loss, parts = mldg_objective(model, batches, self.alpha, self.gamma,
                                     held_out=step % len(batches),
                                     second_order=self.second_order)
        return loss, LossDiagnostics(parts["risks"], penalty=parts["meta_test"],
                                     effective_lambda=self.gamma, total=float(loss.detach()))


def mldg_objective(model, batches, alpha: float, gamma: float, held_out: int = 0,
                   second_order: bool = True) -> tuple[torch.Tensor, dict]:
    """``L_mt(theta) + gamma * L_te(theta')`` with ``theta' = theta - alpha grad L_mt``.

    With ``second_order=False`` the inner gradient is treated as a constant,
    which drops the Hessian term from the outer gradient.
    """
    if len(batches) < 2:
        raise ConfigurationError("MLDG needs at least two training environments")
    meta_train = [b for i, b in enumerate(batches) if i != held_out]
    meta_test = batches[held_out]
    risks = env_risks(model, meta_train)
    l_train = risks.mean()
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(l_train, params, create_graph=second_order, retain_graph=True,
                                allow_unused=True)
    adapted = {}
    for n, p, g in zip(names, params, grads):
        if g is None:
            adapted[n] = p
        else:
            adapted[n] = p - alpha * (g if second_order else g.detach())
    _, logits = functional_call(model, adapted, (meta_test.inputs,))
    if not torch.isfinite(logits).all():
        raise NumericError(f"non-finite model output in environment {meta_test.name!r}")
    l_test = bce_risk(logits, meta_test.y)
    loss = l_train + gamma * l_test
    return loss, {"risks": risks.tolist(), "meta_test": float(l_test.detach())}


_REGISTRY = {cls.name: cls for cls in (ERM, GroupDRO, IRM, VREx, RVP, IGA, CORAL, MLDG)}


def make_objective(algorithm: str, n_envs: int, hparams: dict | None = None) -> Objective:
    """Instantiate an objective from flat hyperparameters.

    Recognised keys: ``lambda``, ``anneal_steps``, ``groupdro_eta``,
    ``mldg_alpha``, ``mldg_gamma``, ``mldg_second_order``; others are ignored.
    """
    hp = dict(hparams or {})
    if algorithm in ORACLES:
        algorithm = "ERM"
    if algorithm not in _REGISTRY:
        raise ConfigurationError(
            f"unknown algorithm {algorithm!r}; valid ids: {ALGORITHMS + ORACLES}")
    cls = _REGISTRY[algorithm]
    if issubclass(cls, _Penalized):
        return cls(n_envs, penalty_weight=hp.get("lambda", 1.0),
                   anneal_steps=int(hp.get("anneal_steps", 0)))
    if cls is GroupDRO:
        return cls(n_envs, groupdro_eta=hp.get("groupdro_eta", 1e-2))
    if cls is MLDG:
        return cls(n_envs, mldg_alpha=hp.get("mldg_alpha", 1e-2),
                   mldg_gamma=hp.get("mldg_gamma", 1.0),
                   second_order=bool(hp.get("mldg_second_order", False)))
    return cls(n_envs)


# Hyperparameter search spaces ----------------------------------------------

BASE_SPACE = {"lr": ("log_uniform", 1e-5, 1e-2)}
ALGORITHM_SPACES = {
    "ERM": {},
    "GroupDRO": {"groupdro_eta": ("log_uniform", 1e-3, 1e-1)},
    "IRM": {"lambda": ("log_uniform", 1e-1, 1e4), "anneal_steps": ("anneal",)},
    "VREx": {"lambda": ("log_uniform", 1e-1, 1e4), "anneal_steps": ("anneal",)},
    "RVP": {"lambda": ("log_uniform", 1e-1, 1e4), "anneal_steps": ("anneal",)},
    "IGA": {"lambda": ("log_uniform", 1e-1, 1e4), "anneal_steps": ("anneal",)},
    "CORAL": {"lambda": ("log_uniform", 1e-1, 1e4), "anneal_steps": ("anneal",)},
    "MLDG": {"mldg_alpha": ("log_uniform", 1e-3, 1e-1), "mldg_gamma": ("fixed", 1.0)},
}


_ALGORITHM_KEYS = {k for sp in ALGORITHM_SPACES.values() for k in sp}


def search_space(algorithm: str, overrides: dict | None = None) -> dict:
    """Default space for ``algorithm`` updated with ``overrides``.

    Overrides naming another algorithm's hyperparameter are ignored, so one
    override table can be shared across all algorithms of an experiment.
    """
    base = "ERM" if algorithm in ORACLES else algorithm
    if base not in ALGORITHM_SPACES:
        raise ConfigurationError(
            f"unknown algorithm {algorithm!r}; valid ids: {ALGORITHMS + ORACLES}")
    own = ALGORITHM_SPACES[base]
    space = {**BASE_SPACE, **own}
    for k, v in (overrides or {}).items():
        if k in _ALGORITHM_KEYS and k not in own:
            continue
        space[k] = tuple(v) if isinstance(v, (list, tuple)) else ("fixed", v)
    return space


def sample_hparams(space: dict, rng: np.random.Generator, total_steps: int) -> dict:
    """Draw one configuration. Distributions: ``log_uniform lo hi``,
    ``uniform lo hi``, ``int lo hi`` (inclusive), ``choice [..]``, ``fixed v``
    and ``anneal`` (integer in [0, 0.75 * total_steps])."""
    out = {}
    for name in sorted(space):
        kind, *args = space[name]
        if kind == "log_uniform":
            lo, hi = args
            out[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        elif kind == "uniform":
            out[name] = float(rng.uniform(*args))
        elif kind == "int":
            out[name] = int(rng.integers(args[0], args[1] + 1))
        elif kind == "choice":
            opts = list(args[0])
            v = opts[int(rng.integers(len(opts)))]
            out[name] = list(v) if isinstance(v, tuple) else v
        elif kind == "fixed":
            out[name] = args[0]
        elif kind == "anneal":
            out[name] = int(rng.integers(0, int(0.75 * total_steps) + 1))
        else:
            raise ConfigurationError(f"unknown distribution {kind!r} for {name!r}")
    return out
