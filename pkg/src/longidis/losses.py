"""Training objectives: swap reconstruction, pairwise logistic alignment of
static codes, an L1 penalty on input gradients of the dynamic block, and the
weighted classification loss.

Reduction convention: every term is summed over voxels/latent pairs and then
divided by the batch size, so the default trade-off weights keep their
meaning when the batch size changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, LossError
from .model import CrossEncoder, LatentCode, swap_static

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.125
    lambda2: float = 0.0125
    tau: float = 2.0
    b_init: float = -10.0
    pos_weight: float = 1.5

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ConfigError(f"lambda1 must be >= 0, got {self.lambda1}")
        if self.lambda2 < 0:
            raise ConfigError(f"lambda2 must be >= 0, got {self.lambda2}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.pos_weight <= 0:
            raise ConfigError(f"pos_weight must be > 0, got {self.pos_weight}")


def recon_loss(
    x1: torch.Tensor,
    x2: torch.Tensor,
    x1_tilde: torch.Tensor,
    x2_tilde: torch.Tensor,
) -> torch.Tensor:
    """Per-pair L1 over all voxels of both swap reconstructions, averaged
    over the batch."""
    shapes = {tuple(t.shape) for t in (x1, x2, x1_tilde, x2_tilde)}
    if len(shapes) != 1:
        raise LossError(f"reconstruction inputs disagree on shape: {sorted(shapes)}")
    batch = x1.shape[0]
    per_pair = (x1 - x1_tilde).abs().flatten(1).sum(dim=1) + (
        x2 - x2_tilde
    ).abs().flatten(1).sum(dim=1)
    return per_pair.sum() / batch


def sigclr_loss(
    s1: torch.Tensor,
    s2: torch.Tensor,
    tau: float,
    b: torch.Tensor | float,
) -> torch.Tensor:
    """Pairwise logistic loss over static codes of a batch of visit pairs.

    Codes indexed (subject i, visit k in {1,2}); every ordered pair of
    distinct codes contributes -log sigmoid(z * (tau * cos + b)) with z = +1
    for same-subject pairs and -1 otherwise, normalized by the number of
    subjects.
    """
    if s1.ndim != 2 or s1.shape != s2.shape:
        raise LossError(
            f"static codes must be two equal (batch, dim) blocks, got "
            f"{tuple(s1.shape)} and {tuple(s2.shape)}"
        )
    n_subjects = s1.shape[0]
    codes = torch.cat([s1, s2], dim=0)
    norms = codes.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise LossError("cosine similarity undefined for a zero static code")
    unit = codes / norms.clamp_min(COSINE_EPS)
    sim = unit @ unit.T
    logits = tau * sim + b
    subject = torch.arange(n_subjects, device=codes.device).repeat(2)
    z = torch.where(subject[:, None] == subject[None, :], 1.0, -1.0)
    offdiag = ~torch.eye(2 * n_subjects, dtype=torch.bool, device=codes.device)
    # -log sigmoid(z * logit) = softplus(-z * logit), stable at both tails
    terms = F.softplus(-z * logits)
    return terms[offdiag].sum() / n_subjects


def _dynamic_of(encoder, x: torch.Tensor) -> torch.Tensor:
    if isinstance(encoder, CrossEncoder):
        out = encoder.encode(x)
    else:
        out = encoder(x)
    if isinstance(out, LatentCode):
        out = out.d
    if out.ndim == 1:
        out = out.unsqueeze(0)
    return out


def grad_penalty(
    x: torch.Tensor,
    encoder,
    mode: str = "surrogate",
    create_graph: bool = True,
) -> torch.Tensor:
    """L1 penalty on input gradients of the dynamic block, summed over the
    given volumes.

    "exact" accumulates one backward pass per dynamic component, giving the
    entrywise L1 of the full Jacobian; tractable only at desk scale.
    "surrogate" backpropagates the sum of dynamic components once, the
    production path. Both stay differentiable in the encoder parameters when
    create_graph is set. Batch samples are treated jointly, so any
    cross-sample coupling the encoder introduces folds into the sum.
    """
    if mode not in ("surrogate", "exact"):
        raise LossError(f'grad_penalty mode must be "surrogate" or "exact", got {mode!r}')
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    d = _dynamic_of(encoder, x)
    if d.grad_fn is None:
        # output carries no graph back to x: the Jacobian is identically zero
        return torch.zeros((), dtype=x.dtype, device=x.device)
    if mode == "surrogate":
        (g,) = torch.autograd.grad(
            d.sum(), x, create_graph=create_graph, retain_graph=True, allow_unused=True
        )
        penalty = g.abs().sum() if g is not None else torch.zeros((), dtype=x.dtype)
    else:
        penalty = torch.zeros((), dtype=x.dtype, device=x.device)
        for k in range(d.shape[1]):
            (g,) = torch.autograd.grad(
                d[:, k].sum(), x, create_graph=create_graph, retain_graph=True,
                allow_unused=True,
            )
            if g is not None:
                penalty = penalty + g.abs().sum()
    if not torch.isfinite(penalty):
        raise LossError("input-gradient penalty is non-finite")
    return penalty


@dataclass(frozen=True)
class LossBreakdown:
    """Raw per-term values plus the weighted total; recon/cl/grad are the
    unweighted terms that get multiplied by 1, lambda1, lambda2."""

    total: torch.Tensor
    recon: torch.Tensor
    cl: torch.Tensor
    grad: torch.Tensor

    def assert_finite(self) -> None:
        for name in ("recon", "cl", "grad", "total"):
            value = getattr(self, name)
            if not torch.isfinite(value):
                raise LossError(
                    f"loss term {name!r} is non-finite ({float(value.detach())})"
                )

    def as_floats(self) -> dict[str, float]:
        return {
            "recon": float(self.recon.detach()),
            "cl": float(self.cl.detach()),
            "grad": float(self.grad.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    x1: torch.Tensor,
    x2: torch.Tensor,
    model: CrossEncoder,
    weights: LossWeights,
    use_cl: bool = True,
    use_grad: bool = True,
    grad_mode: str = "surrogate",
    create_graph: bool = True,
) -> LossBreakdown:
    """Full objective on a batch of same-subject visit pairs:
    recon + lambda1 * contrastive + lambda2 * gradient penalty.

    Disabled terms are exact zeros. The gradient penalty is taken on the
    same (augmented) inputs the encoder sees.
    """
    if x1.shape != x2.shape:
        raise LossError(
            f"pair members disagree on shape: {tuple(x1.shape)} vs {tuple(x2.shape)}"
        )
    if use_grad:
        x1 = x1.detach().requires_grad_(True)
        x2 = x2.detach().requires_grad_(True)
    code1 = model.encode(x1)
    code2 = model.encode(x2)
    mixed1, mixed2 = swap_static(code1, code2)
    x1_tilde = model.decode(mixed1)
    x2_tilde = model.decode(mixed2)
    l_rec = recon_loss(x1, x2, x1_tilde, x2_tilde)

    zero = torch.zeros((), dtype=l_rec.dtype, device=l_rec.device)
    batch = x1.shape[0]

    if use_cl:
        l_cl = sigclr_loss(code1.s, code2.s, weights.tau, model.contrastive_bias)
    else:
        l_cl = zero

    if use_grad:
        d_sum = code1.d.sum() + code2.d.sum()
        if grad_mode == "surrogate":
            g1, g2 = torch.autograd.grad(
                d_sum, [x1, x2], create_graph=create_graph, retain_graph=True
            )
            l_grad = (g1.abs().sum() + g2.abs().sum()) / batch
        elif grad_mode == "exact":
            acc = zero
            for k in range(code1.d.shape[1]):
                g1, g2 = torch.autograd.grad(
                    code1.d[:, k].sum() + code2.d[:, k].sum(),
                    [x1, x2],
                    create_graph=create_graph,
                    retain_graph=True,
                )
                acc = acc + g1.abs().sum() + g2.abs().sum()
            l_grad = acc / batch
        else:
            raise LossError(
                f'grad_mode must be "surrogate" or "exact", got {grad_mode!r}'
            )
    else:
        l_grad = zero

    total = l_rec + weights.lambda1 * l_cl + weights.lambda2 * l_grad
    return LossBreakdown(total=total, recon=l_rec, cl=l_cl, grad=l_grad)


def weighted_bce(
    logits: torch.Tensor,
    labels: torch.Tensor,
    pos_weight: float = 1.0,
) -> torch.Tensor:
    """Binary cross-entropy on logits with the positive-class term scaled by
    pos_weight, averaged over the batch.

    Two-column logits are reduced to the positive-class margin
    logits[:, 1] - logits[:, 0]; one-column input is taken as the margin.
    """
    if pos_weight <= 0:
        raise LossError(f"pos_weight must be > 0, got {pos_weight}")
    if logits.ndim == 2 and logits.shape[1] == 2:
        margin = logits[:, 1] - logits[:, 0]
    elif logits.ndim == 1:
        margin = logits
    else:
        raise LossError(
            f"logits must be (batch, 2) or (batch,), got {tuple(logits.shape)}"
        )
    labels = labels.to(margin.dtype)
    if labels.shape != margin.shape:
        raise LossError(
            f"labels shape {tuple(labels.shape)} does not match batch {tuple(margin.shape)}"
        )
    if not torch.all((labels == 0) | (labels == 1)):
        raise LossError("labels must be binary (0 or 1)")
    # -log sigmoid(u) = softplus(-u); -log(1 - sigmoid(u)) = softplus(u)
    per_sample = pos_weight * labels * F.softplus(-margin) + (1 - labels) * F.softplus(
        margin
    )
    return per_sample.mean()
