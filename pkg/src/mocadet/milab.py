"""Executable verification of the contrastive mutual-information lower bound.

The claim under test: with a positive pair (U, V) and K negatives drawn
i.i.d. from the marginal of V, the contrastive loss L satisfies

    I(U; V) >= ln(1 + K) - L.

On finite discrete joints everything on both sides is exactly computable:
I(U; V) by summation, and L either by Monte Carlo (with a standard error)
or by enumerating all candidate tuples. Two critics are exercised: the
log-density-ratio critic s(u,v) = ln p(v|u)/p(v) (optimal: its softmax
equals the true posterior over the positive slot) and a cosine critic over
random symbol embeddings (suboptimal). Temperature can be folded into the
critic; the estimator also accepts an explicit tau.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_ENUM_LIMIT = 2_000_000  # max enumerated tuples in exact modes


@dataclass
class DiscreteJoint:
    """Probability table p(u, v) over finite alphabets, marginals cached."""

    table: np.ndarray
    pu: np.ndarray = field(init=False)
    pv: np.ndarray = field(init=False)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.size == 0:
            raise ValidationError("joint table must be a non-empty matrix")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValidationError("joint entries must be finite and non-negative")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValidationError(f"joint must sum to 1, got {t.sum()!r}")
        self.table = t
        self.pu = t.sum(axis=1)
        self.pv = t.sum(axis=0)

    @property
    def shape(self):
        return self.table.shape

    def transposed(self) -> "DiscreteJoint":
        return DiscreteJoint(self.table.T.copy())


def exact_mi(joint: DiscreteJoint) -> float:
    """I(U;V) in nats by direct summation, with 0 ln 0 := 0."""
    t = joint.table
    outer = joint.pu[:, None] * joint.pv[None, :]
    mask = t > 0
    return float(np.sum(t[mask] * np.log(t[mask] / outer[mask])))


# -- joint constructors -------------------------------------------------------


def identity_joint(n: int) -> DiscreteJoint:
    return DiscreteJoint(np.eye(n) / n)


def product_joint(pu, pv) -> DiscreteJoint:
    pu = np.asarray(pu, dtype=np.float64)
    pv = np.asarray(pv, dtype=np.float64)
    return DiscreteJoint(np.outer(pu / pu.sum(), pv / pv.sum()))


def random_joint(n_u: int, n_v: int, rng: np.random.Generator) -> DiscreteJoint:
    t = rng.gamma(0.7, size=(n_u, n_v))
    return DiscreteJoint(t / t.sum())


def correlated_joint(n: int, coupling: float, rng: np.random.Generator) -> DiscreteJoint:
    """Mixture of an identity coupling and a random product joint."""
    base = random_joint(n, n, rng)
    prod = np.outer(base.pu, base.pv)
    t = coupling * np.eye(n) / n + (1.0 - coupling) * prod / prod.sum()
    return DiscreteJoint(t / t.sum())


def seeded_joint_suite(n_joints: int, seed: int = 0) -> list:
    """Deterministic mix of couplings and sizes for the certification run."""
    joints = []
    for i in range(n_joints):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        kind = i % 4
        n = int(rng.integers(2, 9))
        if kind == 0:
            joints.append(identity_joint(n))
        elif kind == 1:
            joints.append(product_joint(rng.uniform(0.2, 1, n), rng.uniform(0.2, 1, n)))
        elif kind == 2:
            joints.append(correlated_joint(n, float(rng.uniform(0.3, 0.95)), rng))
        else:
            joints.append(random_joint(n, int(rng.integers(2, 9)), rng))
    return joints


# -- critics -------------------------------------------------------------------


@dataclass(frozen=True)
class Critic:
    kind: str  # "optimal" (log density ratio) | "cosine" (embedding similarity)
    scores: np.ndarray  # s(u, v); -inf allowed off the support

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if np.any(np.isnan(s)) or np.any(s == np.inf):
            raise ValidationError("critic scores must be finite or -inf")
        object.__setattr__(self, "scores", s)


def optimal_critic(joint: DiscreteJoint) -> Critic:
    """s(u, v) = ln[p(v|u) / p(v)]; -inf where p(u, v) = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = joint.table / joint.pu[:, None]
        ratio = cond / joint.pv[None, :]
        scores = np.where(joint.table > 0, np.log(np.where(ratio > 0, ratio, 1.0)), -np.inf)
    return Critic(kind="optimal", scores=scores)


def cosine_critic(n_u: int, n_v: int, dim: int, tau: float,
                  rng: np.random.Generator) -> Critic:
    """Cosine similarity of random unit symbol embeddings, scaled by 1/tau."""
    if tau <= 0:
        raise ValidationError("critic temperature must be positive")
    eu = rng.normal(size=(n_u, dim))
    ev = rng.normal(size=(n_v, dim))
    eu /= np.linalg.norm(eu, axis=1, keepdims=True)
    ev /= np.linalg.norm(ev, axis=1, keepdims=True)
    return Critic(kind="cosine", scores=(eu @ ev.T) / tau)


def constant_critic(n_u: int, n_v: int, value: float = 0.0) -> Critic:
    return Critic(kind="constant", scores=np.full((n_u, n_v), value))


# -- sampling and estimation ---------------------------------------------------


def sample_candidates(joint: DiscreteJoint, K: int, rng: np.random.Generator,
                      size: int | None = None):
    """Draw (u, candidate set, positive slot J).

    The pair (u, v) comes from the joint, the K negatives i.i.d. from the
    marginal p(v) independently of u, and J ~ Uniform{0..K} places the
    positive. Returns (u, candidates[K+1], J); with ``size`` set, arrays of
    that leading dimension.
    """
    if K < 1:
        raise ValidationError("need at least one negative")
    n = 1 if size is None else int(size)
    nu, nv = joint.shape
    flat = rng.choice(nu * nv, size=n, p=joint.table.reshape(-1))
    u, v = np.divmod(flat, nv)
    negs = rng.choice(nv, size=(n, K), p=joint.pv)
    j = rng.integers(0, K + 1, size=n)
    cands = np.empty((n, K + 1), dtype=np.int64)
    for i in range(n):
        row = np.empty(K + 1, dtype=np.int64)
        row[:j[i]] = negs[i, :j[i]]
        row[j[i]] = v[i]
        row[j[i] + 1:] = negs[i, j[i]:]
        cands[i] = row
    if size is None:
        return int(u[0]), cands[0], int(j[0])
    return u, cands, j


@dataclass
class NCEEstimate:
    K: int
    n_samples: int
    loss: float
    bound: float  # ln(1 + K) - loss
    stderr: float


def _losses_from_draws(critic: Critic, tau: float, u, cands, j) -> np.ndarray:
    s = critic.scores[u[:, None], cands] / tau
    m = s.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(s - m).sum(axis=1)))
    pos = s[np.arange(len(j)), j]
    return lse - pos


def infonce_estimate(joint: DiscreteJoint, critic: Critic, K: int,
                     tau: float = 1.0, n_samples: int = 10_000,
                     rng: np.random.Generator | None = None) -> NCEEstimate:
    """Monte-Carlo contrastive loss and the implied lower bound on I(U;V)."""
    if n_samples < 1_000:
        raise ValidationError("need n_samples >= 1000")
    if tau <= 0:
        raise ValidationError("tau must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    u, cands, j = sample_candidates(joint, K, rng, size=n_samples)
    losses = _losses_from_draws(critic, tau, u, cands, j)
    loss = float(losses.mean())
    se = float(losses.std(ddof=1) / math.sqrt(n_samples))
    return NCEEstimate(K=K, n_samples=n_samples, loss=loss,
                       bound=math.log(1 + K) - loss, stderr=se)


def _check_enum_size(n_v: int, K: int) -> None:
    if n_v ** K > _ENUM_LIMIT:
        raise ValidationError(f"enumeration of {n_v}^{K} negative tuples is too large")


def exact_infonce(joint: DiscreteJoint, critic: Critic, K: int,
                  tau: float = 1.0) -> float:
    """Exact expected contrastive loss by enumerating all candidate tuples."""
    if K < 1:
        raise ValidationError("need at least one negative")
    nu, nv = joint.shape
    _check_enum_size(nv, K)
    total = 0.0
    for u in range(nu):
        if joint.pu[u] == 0:
            continue
        srow = critic.scores[u] / tau
        for v in range(nv):
            p_pair = joint.table[u, v]
            if p_pair == 0:
                continue
            for negs in itertools.product(range(nv), repeat=K):
                w = p_pair
                for k in negs:
                    w *= joint.pv[k]
                if w == 0:
                    continue
                s = np.array([srow[v]] + [srow[k] for k in negs])
                m = s.max()
                total += w * float(m + np.log(np.exp(s - m).sum()) - srow[v])
    return total


def _slot_posterior(joint: DiscreteJoint, u: int, cands) -> np.ndarray:
    """True posterior over the positive slot given (u, candidates)."""
    r = np.array([joint.table[u, v] / (joint.pu[u] * joint.pv[v])
                  if joint.pv[v] > 0 else 0.0 for v in cands])
    z = r.sum()
    return r / z if z > 0 else np.full(len(cands), 1.0 / len(cands))


def exact_posterior_entropy(joint: DiscreteJoint, K: int) -> float:
    """E[H(J | U, V_0..V_K)] by enumeration (the irreducible part of the loss)."""
    nu, nv = joint.shape
    _check_enum_size(nv, K + 1)
    total = 0.0
    for u in range(nu):
        if joint.pu[u] == 0:
            continue
        for cands in itertools.product(range(nv), repeat=K + 1):
            # weight of this (unordered slot) configuration: sum over J
            w = 0.0
            for j in range(K + 1):
                wj = joint.table[u, cands[j]] / (K + 1)
                for m in range(K + 1):
                    if m != j:
                        wj *= joint.pv[cands[m]]
                w += wj
            if w == 0:
                continue
            post = _slot_posterior(joint, u, cands)
            nz = post[post > 0]
            total += w * float(-(nz * np.log(nz)).sum())
    return total


def posterior_identity_gap(joint: DiscreteJoint, critic: Critic, K: int,
                           tau: float = 1.0) -> float:
    """Max |true slot posterior - critic softmax| over all reachable tuples.

    Zero (to rounding) iff the critic is the log-density-ratio critic.
    """
    nu, nv = joint.shape
    _check_enum_size(nv, K + 1)
    worst = 0.0
    for u in range(nu):
        if joint.pu[u] == 0:
            continue
        srow = critic.scores[u] / tau
        for cands in itertools.product(range(nv), repeat=K + 1):
            if any(joint.pv[v] == 0 for v in cands):
                continue
            if all(joint.table[u, v] == 0 for v in cands):
                continue  # unreachable: positive slot impossible everywhere
            post = _slot_posterior(joint, u, np.array(cands))
            s = np.array([srow[v] for v in cands])
            m = s.max()
            q = np.exp(s - m)
            q /= q.sum()
            worst = max(worst, float(np.abs(post - q).max()))
    return worst


# -- certification -------------------------------------------------------------


@dataclass
class BoundCell:
    joint_index: int
    critic_kind: str
    K: int
    mi: float
    estimate: NCEEstimate
    violated: bool


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("MOCADET_THREADS", "1")))
    except ValueError:
        return 1


def verify_bound(joints, Ks=(1, 3, 7, 15), n_samples: int = 20_000,
                 seed: int = 0, se_slack: float = 5.0,
                 exact_tolerance: float = 1e-9) -> dict:
    """Certify the lower bound on a suite of joints.

    For every (joint, critic in {optimal, cosine}, K): assert
    ln(1+K) - L_hat <= I + se_slack * SE. Where enumeration is affordable
    (support <= 6, K <= 3) the same inequality is asserted exactly with
    ``exact_tolerance``; the slot-posterior identity is checked for the
    optimal critic; and the optimal-critic bound must be non-decreasing in
    K within 2 combined SEs (exactly, in enumeration mode).
    """
    cells = []
    identity_gaps = []
    mono_failures = []
    exact_checked = 0

    def run_joint(ji_joint):
        ji, joint = ji_joint
        out = []
        mi = exact_mi(joint)
        nu, nv = joint.shape
        critics = [optimal_critic(joint),
                   cosine_critic(nu, nv, dim=8, tau=0.5,
                                 rng=np.random.default_rng(np.random.SeedSequence([seed, ji, 101])))]
        gaps = []
        monos = []
        n_exact = 0
        for ci, critic in enumerate(critics):
            bounds = []
            for ki, K in enumerate(Ks):
                rng = np.random.default_rng(np.random.SeedSequence([seed, ji, ci, K]))
                est = infonce_estimate(joint, critic, K, 1.0, n_samples, rng)
                # 1e-12 absorbs float rounding when MI and SE are both ~0
                violated = est.bound > mi + se_slack * est.stderr + 1e-12
                out.append(BoundCell(ji, critic.kind, K, mi, est, violated))
                bounds.append(est)
                if nv <= 6 and K <= 3:
                    exact_loss = exact_infonce(joint, critic, K)
                    exact_bound = math.log(1 + K) - exact_loss
                    n_exact += 1
                    if exact_bound > mi + exact_tolerance:
                        out.append(BoundCell(ji, critic.kind + "-exact", K, mi,
                                             NCEEstimate(K, 0, exact_loss, exact_bound, 0.0),
                                             True))
            if critic.kind == "optimal":
                if nv ** 2 <= _ENUM_LIMIT:
                    gaps.append(posterior_identity_gap(joint, critic, 1))
                for a, b in zip(bounds[:-1], bounds[1:]):
                    slack = 2.0 * math.sqrt(a.stderr ** 2 + b.stderr ** 2) + 1e-12
                    if b.bound < a.bound - slack:
                        monos.append((ji, a.K, b.K, a.bound, b.bound))
        return out, gaps, monos, n_exact

    workers = n_workers()
    indexed = list(enumerate(joints))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_joint, indexed))
    else:
        results = [run_joint(x) for x in indexed]

    for out, gaps, monos, n_exact in results:
        cells.extend(out)
        identity_gaps.extend(gaps)
        mono_failures.extend(monos)
        exact_checked += n_exact

    violations = [c for c in cells if c.violated]
    return {
        "n_joints": len(indexed),
        "Ks": list(Ks),
        "n_samples": n_samples,
        "cells": cells,
        "violations": violations,
        "n_exact_cells": exact_checked,
        "posterior_gap_max": max(identity_gaps) if identity_gaps else 0.0,
        "monotonicity_failures": mono_failures,
        "passed": (not violations and not mono_failures
                   and (not identity_gaps or max(identity_gaps) < 1e-10)),
    }


def report_to_json(report: dict) -> dict:
    return {
        "n_joints": report["n_joints"],
        "Ks": report["Ks"],
        "n_samples": report["n_samples"],
        "passed": report["passed"],
        "n_cells": len(report["cells"]),
        "n_exact_cells": report["n_exact_cells"],
        "n_violations": len(report["violations"]),
        "posterior_gap_max": report["posterior_gap_max"],
        "monotonicity_failures": report["monotonicity_failures"],
        "cells": [
            {"joint": c.joint_index, "critic": c.critic_kind, "K": c.K,
             "mi": c.mi, "loss": c.estimate.loss, "bound": c.estimate.bound,
             "stderr": c.estimate.stderr, "violated": c.violated}
            for c in report["cells"]
        ],
    }
