"""Visual capsules: primary-capsule construction, EM routing by agreement,
and query-driven soft/hard masking of capsule types.

A capsule field holds, for every grid cell, C capsules of a 4x4 pose matrix
plus a scalar activation. Routing runs independently per cell with transforms
shared across cells; masking scales whole capsule types (all 16 pose entries
and the activation) by a per-type weight derived from the textual query.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

POSE = 4
POSE_DIM = POSE * POSE
CAPSULE_COMPONENTS = POSE_DIM + 1  # 16 pose entries + activation

VAR_FLOOR = 1e-6
ACT_EPS = 1e-15
_LOG_2PI = math.log(2.0 * math.pi)


class CapsuleField(NamedTuple):
    poses: torch.Tensor  # (B, H, W, C, 4, 4)
    activations: torch.Tensor  # (B, H, W, C)

    @property
    def num_types(self) -> int:
        return self.poses.shape[3]

    def components(self) -> torch.Tensor:
        """Flattened per-capsule components, (B, H, W, C, 17)."""
        b, h, w, c = self.activations.shape
        flat = self.poses.reshape(b, h, w, c, POSE_DIM)
        return torch.cat([flat, self.activations.unsqueeze(-1)], dim=-1)


@dataclass
class MaskWeights:
    weights: torch.Tensor  # (B, C)
    logits: torch.Tensor  # (B, C)
    mode: str  # "soft" | "hard"


class PrimaryCapsules(nn.Module):
    """1x1 linear map from cell features to C1 capsules per cell: poses with
    no nonlinearity, activations through a logistic unit."""

    def __init__(self, d_features: int, num_types: int):
        super().__init__()
        self.num_types = num_types
        self.pose = nn.Linear(d_features, num_types * POSE_DIM)
        self.activation = nn.Linear(d_features, num_types)

    def forward(self, features: torch.Tensor) -> CapsuleField:
        if not torch.isfinite(features).all():
            raise ValueError("non-finite feature input to primary capsules")
        b, h, w, _ = features.shape
        poses = self.pose(features).reshape(b, h, w, self.num_types, POSE, POSE)
        acts = torch.sigmoid(self.activation(features))
        return CapsuleField(poses, acts)


class EmRouting(nn.Module):
    """EM routing from C1 to C2 capsule types, independently per cell.

    Each M-step recomputes every output capsule as an assignment-weighted
    Gaussian over the votes; each E-step reassigns inputs by posterior
    responsibility. The inverse-temperature schedule sharpens activations
    across iterations. The final E-step is skipped.
    """

    def __init__(self, in_types: int, out_types: int, n_iter: int = 3,
                 lambda_schedule: Optional[Tuple[float, ...]] = None):
        super().__init__()
        if n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        self.in_types = in_types
        self.out_types = out_types
        self.n_iter = n_iter
        if lambda_schedule is None:
            lambda_schedule = tuple(
                0.01 + (1.0 - 0.01) * i / max(n_iter - 1, 1) for i in range(n_iter)
            )
        if len(lambda_schedule) != n_iter or any(
            b <= a for a, b in zip(lambda_schedule, lambda_schedule[1:])
        ):
            raise ValueError("lambda schedule must have n_iter strictly increasing entries")
        self.lambda_schedule = tuple(lambda_schedule)
        self.transforms = nn.Parameter(
            torch.randn(in_types, out_types, POSE, POSE, dtype=torch.float64) * 0.5
        )
        self.beta_a = nn.Parameter(torch.zeros(out_types, dtype=torch.float64))
        self.beta_u = nn.Parameter(torch.zeros(out_types, dtype=torch.float64))

    def forward(self, field: CapsuleField) -> CapsuleField:
        poses, acts = field
        b, h, w, c1 = acts.shape
        c2 = self.out_types
        n = b * h * w
        p = poses.reshape(n, c1, POSE, POSE)
        a_in = acts.reshape(n, c1)

        # votes[n, i, j] = pose_i @ transform_ij, flattened to 16 dims
        votes = torch.einsum("nipq,ijqr->nijpr", p, self.transforms)
        votes = votes.reshape(n, c1, c2, POSE_DIM)
        votes_sq = votes * votes
        # The per-(i,j) contractions below are phrased as batched matmuls over
        # all (j, j') pairs followed by taking the diagonal; the redundant
        # flops are much cheaper than strided elementwise reductions.
        votes_cat = torch.cat([votes, votes_sq], dim=-1).reshape(n, c1, c2 * 2 * POSE_DIM)

        assign = votes.new_full((n, c1, c2), 1.0 / c2)
        mu = logit_act = None
        self.last_min_raw_var = float("inf")
        for it in range(self.n_iter):
            # M-step: assignment-weighted Gaussian per output type
            r = assign * a_in.unsqueeze(-1)  # (n, C1, C2)
            r_sum = r.sum(dim=1).clamp(min=1e-12)  # (n, C2)
            moments = torch.bmm(r.transpose(1, 2), votes_cat)
            moments = moments.reshape(n, c2, c2, 2 * POSE_DIM)
            moments = moments.diagonal(dim1=1, dim2=2).permute(0, 2, 1)  # (n, C2, 32)
            moments = moments / r_sum.unsqueeze(-1)
            mu = moments[..., :POSE_DIM]
            raw_var = moments[..., POSE_DIM:] - mu * mu
            self.last_min_raw_var = min(
                self.last_min_raw_var, float(raw_var.detach().min())
            )
            # Additive floor: smooth everywhere (unlike clamping) and still
            # guarantees var >= VAR_FLOOR. The raw second moment can dip
            # epsilon-negative numerically; rectify before adding the floor.
            var = raw_var.clamp(min=0.0) + VAR_FLOOR
            cost = (self.beta_u.unsqueeze(-1) + 0.5 * torch.log(var)) * r_sum.unsqueeze(-1)
            logit_act = self.lambda_schedule[it] * (self.beta_a - cost.sum(dim=-1))
            if it == self.n_iter - 1:
                break
            # E-step (log domain): responsibilities from activation * Gaussian
            inv_var = 1.0 / var  # (n, C2, 16)
            t1 = torch.bmm(votes_sq.reshape(n, c1 * c2, POSE_DIM), inv_var.transpose(1, 2))
            t1 = t1.reshape(n, c1, c2, c2).diagonal(dim1=2, dim2=3)  # (n, C1, C2)
            t2 = torch.bmm(votes.reshape(n, c1 * c2, POSE_DIM), (mu * inv_var).transpose(1, 2))
            t2 = t2.reshape(n, c1, c2, c2).diagonal(dim1=2, dim2=3)
            t3 = (mu * mu * inv_var).sum(dim=-1)  # (n, C2)
            log_gauss = (
                -0.5 * (t1 - 2.0 * t2 + t3.unsqueeze(1))
                - 0.5 * torch.log(var).sum(dim=-1).unsqueeze(1)
                - 0.5 * POSE_DIM * _LOG_2PI
            )
            assign = torch.softmax(F.logsigmoid(logit_act).unsqueeze(1) + log_gauss, dim=2)

        out_poses = mu.reshape(b, h, w, c2, POSE, POSE)
        # Keep activations in the open interval: the logistic saturates to
        # exactly 0.0 / 1.0 in floating point for |logit| beyond ~37.
        out_acts = torch.sigmoid(logit_act).clamp(min=ACT_EPS, max=1.0 - ACT_EPS)
        out_acts = out_acts.reshape(b, h, w, c2)
        if not (torch.isfinite(out_poses).all() and torch.isfinite(out_acts).all()):
            raise FloatingPointError("non-finite values produced by EM routing")
        return CapsuleField(out_poses, out_acts)


class MaskHead(nn.Module):
    """Maps a textual query to one relevance logit per capsule type.

    kind="direct": a plain affine map query -> C logits.
    kind="per_component": the query maps to a (C, 17) feature block; each
    type's logit is the inner product of that block with the spatial mean of
    the type's capsule components.
    """

    def __init__(self, d: int, num_types: int, kind: str = "direct"):
        super().__init__()
        if kind not in ("direct", "per_component"):
            raise ValueError(f"unknown mask head kind {kind!r}")
        self.kind = kind
        self.num_types = num_types
        if kind == "direct":
            self.map = nn.Linear(d, num_types)
        else:
            self.map = nn.Linear(d, num_types * CAPSULE_COMPONENTS)

    def forward(self, query: torch.Tensor, field: Optional[CapsuleField] = None) -> torch.Tensor:
        if self.kind == "direct":
            return self.map(query)
        if field is None:
            raise ValueError("per_component mask head needs the capsule field")
        feat = self.map(query).reshape(-1, self.num_types, CAPSULE_COMPONENTS)
        mean_components = field.components().mean(dim=(1, 2))  # (B, C, 17)
        return (feat * mean_components).sum(dim=-1)


def _apply_weights(weights: torch.Tensor, field: CapsuleField) -> CapsuleField:
    w_pose = weights[:, None, None, :, None, None]
    w_act = weights[:, None, None, :]
    return CapsuleField(field.poses * w_pose, field.activations * w_act)


def soft_mask(logits: torch.Tensor, field: CapsuleField) -> Tuple[CapsuleField, MaskWeights]:
    """Scale every capsule type by its softmax weight; gradients reach all types."""
    weights = torch.softmax(logits, dim=-1)
    return _apply_weights(weights, field), MaskWeights(weights, logits, "soft")


def hard_mask(logits: torch.Tensor, field: CapsuleField) -> Tuple[CapsuleField, MaskWeights]:
    """Keep only the argmax type (ties break to the lowest index); the
    selection is piecewise constant, so no gradient flows to the logits or to
    the masked-out types.

    Selection runs on the softmax of the logits, which has the same argmax
    but also agrees with the soft mask when logit differences fall below
    float resolution.
    """
    idx = torch.argmax(torch.softmax(logits.detach(), dim=-1), dim=-1)
    weights = F.one_hot(idx, num_classes=logits.shape[-1]).to(logits.dtype)
    return _apply_weights(weights, field), MaskWeights(weights, logits, "hard")


def masked_components(field: CapsuleField) -> torch.Tensor:
    """(B, H, W, C*17) view used by the knowledge projection."""
    b, h, w, c = field.activations.shape
    return field.components().reshape(b, h, w, c * CAPSULE_COMPONENTS)
