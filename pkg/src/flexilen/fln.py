"""Multi-branch manager: combined loss, unseen-length routing, param counting.

Training runs every branch on its own view of the same trajectory; the long
branch is fit by negative log-likelihood while the shorter branches are
pulled toward the long branch's predicted distribution. At inference an
arbitrary observed length is routed to the branch with the nearest training
length (ties go to the longer branch).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from .autodiff import Tensor
from .backbone import FlnParams
from .config import BranchConfig
from .data import ObservationBundle
from .mixture import MixturePrediction, kl_distill, nll


@dataclass
class FlnLoss:
    total: Tensor
    reg: Tensor
    kl: Tensor


def fln_loss(
    bundle: ObservationBundle,
    future: np.ndarray,
    params: FlnParams,
    cfg: BranchConfig,
) -> FlnLoss:
    """Combined loss over the three branches of one (possibly batched) bundle.

    reg is the long branch's NLL against the shared future; kl is the sum of
    teacher-to-student distillation terms in the default configuration, or
    the direct per-branch NLL when temporal distillation is ablated.
    """
    lengths = cfg.lengths
    for branch, h in lengths.items():
        if bundle.observations[branch].shape[-2] != h:
            raise ValueError(
                f"bundle branch {branch} has length {bundle.observations[branch].shape[-2]}, "
                f"config expects {h}"
            )
    preds = {
        branch: bb.forward(bundle.observations[branch], branch, params)
        for branch in ("L", "M", "S")
    }
    reg = nll(preds["L"], future)
    if cfg.temporal_distillation:
        kl = kl_distill(preds["L"], preds["M"], cfg.detach_teacher) + kl_distill(
            preds["L"], preds["S"], cfg.detach_teacher
        )
    else:
        # the direct approach: fit every branch to the future independently
        kl = nll(preds["M"], future) + nll(preds["S"], future)
    total = reg + cfg.lambda_kl * kl
    return FlnLoss(total=total, reg=reg, kl=kl)


def route(h_prime: int, lengths: dict[str, int]) -> str:
    """Branch whose training length is nearest h_prime; ties pick the longer."""
    if h_prime < 1:
        raise ValueError("observed length must be >= 1")
    return min(lengths, key=lambda b: (abs(h_prime - lengths[b]), -lengths[b]))


def route_bruteforce(h_prime: int, lengths: dict[str, int]) -> str:
    """Enumeration oracle for route (used by tests and the sweep report)."""
    best, best_key = None, None
    for branch, h in lengths.items():
        key = (abs(h_prime - h), -h)
        if best_key is None or key < best_key:
            best, best_key = branch, key
    return best


def forward_routed(
    observations: np.ndarray, params: FlnParams, capture=None
) -> tuple[MixturePrediction, str]:
    """Route an arbitrary-length observation and run the chosen branch.

    Inputs longer than the branch keep their most recent window; inputs
    shorter than every branch length are rejected.
    """
    obs = np.asarray(observations, dtype=np.float64)
    h_prime = obs.shape[-2]
    shortest = min(params.lengths.values())
    if h_prime < shortest:
        raise ValueError(
            f"observed length {h_prime} is shorter than every branch length "
            f"(minimum {shortest}); no branch can be fed"
        )
    branch = route(h_prime, params.lengths)
    h_branch = params.lengths[branch]
    if h_prime > h_branch:
        obs = obs[..., -h_branch:, :]
    pred = bb.forward(obs, branch, params, capture=capture, allow_shorter=True)
    return pred, branch


@dataclass
class ParamCount:
    shared: int
    per_branch: dict[str, int]
    single_total: int
    extra: int
    overhead: float
    total: int


def count_parameters(params: FlnParams) -> ParamCount:
    """Parameter accounting: shared vs branch-specific, plus the overhead the
    extra branches add relative to an equivalent single-branch model."""
    shared = 0
    per_branch: dict[str, int] = {b: 0 for b in params.branch_ids}
    for name, tensor in params.tensors.items():
        size = tensor.size
        head = name.split(".", 2)
        if head[0] in ("theta", "sln", "pe") and head[1] in per_branch:
            per_branch[head[1]] += size
        else:
            shared += size
    reference = params.branch_ids[-1]  # the longest branch stands in for a single model
    single_total = shared + per_branch[reference]
    extra = sum(count for branch, count in per_branch.items() if branch != reference)
    overhead = extra / single_total if single_total else 0.0
    return ParamCount(
        shared=shared,
        per_branch=per_branch,
        single_total=single_total,
        extra=extra,
        overhead=overhead,
        total=shared + sum(per_branch.values()),
    )
