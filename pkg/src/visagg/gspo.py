"""Group-weighted sequence-policy math: softmax reward weights, the
KL-regularized weighted NLL loss, exact tabular KL, a differentiable toy
policy for gradient checking, and the curriculum candidate mixer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, VisaggError

logger = logging.getLogger(__name__)


class GspoError(VisaggError):
    pass


class NonFiniteReward(GspoError):
    pass


class ShapeMismatch(GspoError):
    pass


class SupportMismatch(GspoError):
    pass


class EmptyPools(GspoError):
    pass


# ---------------------------------------------------------------------------
# Group weights and loss
# ---------------------------------------------------------------------------


def group_weights(rewards, lambda_: float) -> np.ndarray:
    """Within-group softmax weights ``exp(lambda*R_j) / sum_k exp(lambda*R_k)``.

    Computed with max-subtraction so large rewards cannot overflow. Weights
    sum to 1; equal rewards (or lambda=0) give exactly uniform weights.
    ``lambda_=inf`` is the sharp limit: mass splits evenly over the argmax set.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 1:
        raise ShapeMismatch("rewards must be a non-empty vector")
    if not np.all(np.isfinite(r)):
        raise NonFiniteReward("rewards must be finite")
    if math.isinf(lambda_):
        mask = (r == r.max()).astype(float)
        return mask / mask.sum()
    if not math.isfinite(lambda_):
        raise NonFiniteReward("lambda must be finite or +inf")
    z = lambda_ * r
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


@dataclass(frozen=True)
class GroupRollouts:
    """One prompt's group of scored rollouts with sequence log-probs.

    ``kl_terms`` is either one exact KL scalar (tabular mode) or a per-rollout
    vector of sampled estimates, averaged inside the loss.
    """

    rewards: tuple[float, ...]
    logprobs_theta: tuple[float, ...]
    kl_terms: float | tuple[float, ...] | None = None
    lambda_: float = 1.0
    alpha_kl: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        object.__setattr__(self, "logprobs_theta", tuple(float(v) for v in self.logprobs_theta))
        if len(self.rewards) < 2:
            raise ShapeMismatch("a group needs at least 2 rollouts")
        if len(self.logprobs_theta) != len(self.rewards):
            raise ShapeMismatch("logprobs_theta must align with rewards")
        if not all(math.isfinite(r) for r in self.rewards):
            raise NonFiniteReward("rewards must be finite")
        if isinstance(self.kl_terms, (list, tuple, np.ndarray)):
            terms = tuple(float(v) for v in self.kl_terms)
            if len(terms) != len(self.rewards):
                raise ShapeMismatch("kl_terms vector must align with rewards")
            object.__setattr__(self, "kl_terms", terms)

    def kl_value(self) -> float:
        if self.kl_terms is None:
            return 0.0
        if isinstance(self.kl_terms, tuple):
            return float(np.mean(self.kl_terms))
        return float(self.kl_terms)


def gspo_loss(group: GroupRollouts) -> float:
    """Weighted NLL plus KL regularization.

    ``L = -sum_j w_j * logprob_theta[j] + alpha_kl * KL`` with the weights
    treated as constants (no gradient flows through them).
    """
    w = group_weights(group.rewards, group.lambda_)
    logp = np.asarray(group.logprobs_theta, dtype=float)
    return float(-(w @ logp) + group.alpha_kl * group.kl_value())


# ---------------------------------------------------------------------------
# Tabular toy policy and exact KL
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyPolicy:
    """Categorical policy over a (state x action) logit table."""

    logits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.logits, dtype=float)
        if arr.ndim != 2:
            raise ShapeMismatch("logits must be a 2-D (state x action) table")
        object.__setattr__(self, "logits", arr)

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def sequence_logprob(self, steps) -> float:
        """Log-probability of a (state, action) sequence under the policy."""
        lp = self.log_probs()
        return float(sum(lp[s, a] for s, a in steps))


def _as_prob_table(policy) -> np.ndarray:
    if isinstance(policy, ToyPolicy):
        return policy.probs()
    arr = np.asarray(policy, dtype=float)
    if arr.ndim != 2:
        raise ShapeMismatch("probability table must be 2-D")
    return arr


def kl_tabular(policy, ref, state_dist=None) -> float:
    """Exact ``KL[pi || ref]`` averaged over a state distribution.

    Accepts ToyPolicy instances or raw probability tables of matching shape;
    the reference must be strictly positive everywhere. Zero iff the policies
    agree on every state with positive weight.
    """
    p = _as_prob_table(policy)
    q = _as_prob_table(ref)
    if p.shape != q.shape:
        raise SupportMismatch(f"shape mismatch: {p.shape} vs {q.shape}")
    if np.any(q <= 0):
        raise SupportMismatch("reference policy must be positive on the support")
    if state_dist is None:
        d = np.full(p.shape[0], 1.0 / p.shape[0])
    else:
        d = np.asarray(state_dist, dtype=float)
        if d.shape != (p.shape[0],):
            raise SupportMismatch("state_dist must have one weight per state")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return float(d @ terms.sum(axis=1))


# ---------------------------------------------------------------------------
# Toy-policy loss and analytic gradient
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyGroupSpec:
    """A group of short rollouts under the toy policy, plus loss constants."""

    rollouts: tuple[tuple[tuple[int, int], ...], ...]
    rewards: tuple[float, ...]
    ref: ToyPolicy
    lambda_: float = 1.0
    alpha_kl: float = 0.02
    state_dist: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.rollouts) != len(self.rewards):
            raise ShapeMismatch("rollouts must align with rewards")
        if len(self.rewards) < 1:
            raise ShapeMismatch("need at least one rollout")
        object.__setattr__(
            self, "rollouts", tuple(tuple((int(s), int(a)) for s, a in r) for r in self.rollouts)
        )
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))


def toy_gspo_loss(policy: ToyPolicy, spec: ToyGroupSpec) -> float:
    """Group loss evaluated on the toy policy (exact tabular KL)."""
    w = group_weights(spec.rewards, spec.lambda_)
    logps = np.array([policy.sequence_logprob(r) for r in spec.rollouts])
    kl = kl_tabular(policy, spec.ref, spec.state_dist) if spec.alpha_kl != 0 else 0.0
    return float(-(w @ logps) + spec.alpha_kl * kl)


def toy_policy_grad(policy: ToyPolicy, spec: ToyGroupSpec) -> np.ndarray:
    """Analytic gradient of toy_gspo_loss w.r.t. the policy logits.

    Weights are constants (they depend only on rewards). Per visited step the
    NLL term contributes ``w_j * (pi(.|s) - onehot(a))``; the KL term
    contributes ``alpha_kl * d(s) * pi(b|s) * (log(pi(b|s)/ref(b|s)) - KL_s)``.
    """
    w = group_weights(spec.rewards, spec.lambda_)
    probs = policy.probs()
    grad = np.zeros_like(probs)
    for weight, rollout in zip(w, spec.rollouts):
        for s, a in rollout:
            grad[s] += weight * probs[s]
            grad[s, a] -= weight
    if spec.alpha_kl != 0:
        ref_probs = spec.ref.probs()
        if ref_probs.shape != probs.shape:
            raise SupportMismatch("reference policy shape mismatch")
        d = (
            np.full(probs.shape[0], 1.0 / probs.shape[0])
            if spec.state_dist is None
            else np.asarray(spec.state_dist, dtype=float)
        )
        log_ratio = policy.log_probs() - np.log(ref_probs)
        kl_per_state = (probs * log_ratio).sum(axis=1, keepdims=True)
        grad += spec.alpha_kl * d[:, None] * probs * (log_ratio - kl_per_state)
    return grad


def finite_difference_grad(policy: ToyPolicy, spec: ToyGroupSpec, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of toy_gspo_loss, the checking oracle."""
    base = np.array(policy.logits, dtype=float)
    grad = np.zeros_like(base)
    for s in range(base.shape[0]):
        for a in range(base.shape[1]):
            bumped = base.copy()
            bumped[s, a] += h
            up = toy_gspo_loss(ToyPolicy(bumped), spec)
            bumped[s, a] -= 2 * h
            down = toy_gspo_loss(ToyPolicy(bumped), spec)
            grad[s, a] = (up - down) / (2 * h)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    errors: tuple[float, ...]
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= 1e-4


def random_toy_instance(rng) -> tuple[ToyPolicy, ToyGroupSpec]:
    """One seeded random gradient-check instance."""
    n_states = int(rng.integers(2, 5))
    n_actions = int(rng.integers(2, 6))
    policy = ToyPolicy(rng.normal(size=(n_states, n_actions)))
    ref = ToyPolicy(rng.normal(size=(n_states, n_actions)))
    j = int(rng.integers(2, 6))
    rollouts = []
    for _ in range(j):
        length = int(rng.integers(1, 7))
        rollouts.append(
            tuple(
                (int(rng.integers(n_states)), int(rng.integers(n_actions)))
                for _ in range(length)
            )
        )
    rewards = tuple(float(v) for v in rng.normal(scale=2.0, size=j))
    lambda_ = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
    alpha_kl = float(rng.choice([0.0, 0.02, 0.1]))
    raw = rng.random(n_states) + 0.1
    state_dist = raw / raw.sum()
    spec = ToyGroupSpec(
        rollouts=tuple(rollouts),
        rewards=rewards,
        ref=ref,
        lambda_=lambda_,
        alpha_kl=alpha_kl,
        state_dist=state_dist,
    )
    return policy, spec


def gradient_check(seed: int = 0, instances: int = 100, h: float = 1e-5) -> GradCheckReport:
    """Compare analytic and central-difference gradients on random instances.

    The per-instance error is ``max|g_a - g_fd|`` scaled by the sup norm of
    the finite-difference gradient (floored at 1e-3 so near-zero gradients
    are judged on absolute error).
    """
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        policy, spec = random_toy_instance(rng)
        analytic = toy_policy_grad(policy, spec)
        numeric = finite_difference_grad(policy, spec, h=h)
        denom = max(float(np.abs(numeric).max()), 1e-3)
        errors.append(float(np.abs(analytic - numeric).max()) / denom)
    return GradCheckReport(max_rel_error=max(errors), errors=tuple(errors), instances=instances)


# ---------------------------------------------------------------------------
# Curriculum mixing
# ---------------------------------------------------------------------------

_STAGE_COUNTS = {"early": (3, 1), "middle": (2, 2), "late": (1, 3)}


@dataclass(frozen=True)
class MixStage:
    """Teacher/on-policy candidate counts for one training stage."""

    stage: str
    teacher_count: int
    onpolicy_count: int

    def __post_init__(self) -> None:
        if self.teacher_count < 0 or self.onpolicy_count < 0:
            raise ConfigError("counts must be >= 0")
        if self.teacher_count + self.onpolicy_count < 1:
            raise ConfigError("stage must draw at least one candidate")

    @classmethod
    def for_stage(cls, stage: str) -> "MixStage":
        """The staged schedule for groups of 4: (3:1) early, (2:2) middle, (1:3) late."""
        if stage not in _STAGE_COUNTS:
            raise ConfigError(f"unknown stage: {stage!r}")
        teacher, onpolicy = _STAGE_COUNTS[stage]
        return cls(stage=stage, teacher_count=teacher, onpolicy_count=onpolicy)


def _draw(pool: list, count: int, rng, label: str) -> list:
    if count <= 0:
        return []
    if len(pool) < count:
        logger.warning("%s pool short (%d < %d); shrinking draw", label, len(pool), count)
        count = len(pool)
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in idx]


def curriculum_sample(stage, teacher_pool: list, onpolicy_pool: list, rng) -> list:
    """Draw a candidate set mixing teacher and on-policy trajectories.

    Draws are uniform without replacement from each pool per the stage's
    counts, then shuffled together. Short pools shrink their draw with a
    logged warning; two empty pools are an error.
    """
    mix = MixStage.for_stage(stage) if isinstance(stage, str) else stage
    if not teacher_pool and not onpolicy_pool:
        raise EmptyPools("both candidate pools are empty")
    picked = _draw(list(teacher_pool), mix.teacher_count, rng, "teacher") + _draw(
        list(onpolicy_pool), mix.onpolicy_count, rng, "on-policy"
    )
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


# ---------------------------------------------------------------------------
# Logged-rollout files
# ---------------------------------------------------------------------------


def load_logged_rollouts(
    path: str, lambda_: float = 1.0, alpha_kl: float = 0.02
) -> dict[str, GroupRollouts]:
    """Group a JSONL rollout log by prompt.

    Each line holds {"prompt_id", "rollout_id", "reward_breakdown",
    "logprob_theta", "logprob_ref"}; the reward may be a bare number or a
    breakdown object with a "total". Per-rollout KL estimates are
    ``logprob_theta - logprob_ref`` (the sampled estimator).
    """
    from .evalkit import SchemaError

    rows: dict[str, list[tuple[float, float, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                reward = obj["reward_breakdown"]
                total = float(reward["total"]) if isinstance(reward, dict) else float(reward)
                lp_theta = float(obj["logprob_theta"])
                lp_ref = float(obj["logprob_ref"])
                prompt_id = str(obj["prompt_id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaError(line_no, f"bad rollout line: {exc}") from exc
            rows.setdefault(prompt_id, []).append((total, lp_theta, lp_theta - lp_ref))
    groups = {}
    for prompt_id, entries in rows.items():
        rewards, logps, kls = zip(*entries)
        groups[prompt_id] = GroupRollouts(
            rewards=rewards,
            logprobs_theta=logps,
            kl_terms=kls,
            lambda_=lambda_,
            alpha_kl=alpha_kl,
        )
    return groups


def loss_report(groups: dict[str, GroupRollouts]) -> dict:
    """Loss and diagnostics per prompt plus the mean loss."""
    prompts = {}
    for prompt_id, group in sorted(groups.items()):
        w = group_weights(group.rewards, group.lambda_)
        prompts[prompt_id] = {
            "loss": gspo_loss(group),
            "kl_estimate": group.kl_value(),
            "weights": [float(v) for v in w],
            "mean_reward": float(np.mean(group.rewards)),
            "n_rollouts": len(group.rewards),
        }
    mean_loss = float(np.mean([p["loss"] for p in prompts.values()])) if prompts else 0.0
    return {"prompts": prompts, "mean_loss": mean_loss}
