"""Finite-difference verification of analytic gradients.

Each selector builds a small deterministic 64-bit instance, computes analytic
gradients with a single backward pass, then compares them against central
finite differences taken elementwise over every tensor in the group.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .backbone import BiMbBlock, SsmParams, selective_scan
from .config import ModelConfig
from .losses import (
    RatrConfig,
    batch_hard_triplet,
    build_similarity_views,
    dktau,
    ratr,
    total_loss,
)
from .mgfe import build_model


@dataclass
class GroupResult:
    name: str
    rel_err: float


@dataclass
class GradCheckReport:
    target: str
    tolerance: float
    groups: list[GroupResult]

    @property
    def max_rel_err(self) -> float:
        return max(g.rel_err for g in self.groups)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        lines = [
            f"{self.target}: max rel err {self.max_rel_err:.3e} "
            f"({'PASS' if self.passed else 'FAIL'} at {self.tolerance:.1e})"
        ]
        lines += [f"  {g.name}: {g.rel_err:.3e}" for g in self.groups]
        return "\n".join(lines)


def central_difference(loss_fn, tensor: Tensor, eps: float = 1e-5) -> Tensor:
    """Elementwise central differences of a scalar function of ``tensor``."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)  # view, so writes reach the tensor used by loss_fn
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            plus = float(loss_fn())
            flat[i] = original - eps
            minus = float(loss_fn())
            flat[i] = original
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def _relative_error(analytic: Tensor, numeric: Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def check_groups(
    loss_fn, groups: dict[str, Tensor], eps: float = 1e-5
) -> list[GroupResult]:
    """Compare analytic and finite-difference gradients per named tensor."""
    for t in groups.values():
        t.grad = None
        t.requires_grad_(True)
    loss = loss_fn()
    loss.backward()
    results = []
    for name, tensor in groups.items():
        analytic = (
            tensor.grad.detach().clone()
            if tensor.grad is not None
            else torch.zeros_like(tensor)
        )
        numeric = central_difference(loss_fn, tensor.detach(), eps)
        results.append(GroupResult(name=name, rel_err=_relative_error(analytic, numeric)))
    return results


def _tiny_model_config() -> ModelConfig:
    return ModelConfig(
        image_height=8,
        image_width=8,
        patch_size=4,
        stride=4,
        embed_dim=8,
        num_class_tokens=2,
        num_cameras=2,
        side_weight=3.0,
        depth=3,
        state_dim=2,
        expand=1,
        conv_width=2,
        reduction=2,
        num_branches=2,
        fusion="max",
        drop_rate=0.0,
    )


def _check_linear(eps: float) -> list[GroupResult]:
    torch.manual_seed(11)
    layer = torch.nn.Linear(5, 4, dtype=torch.float64)
    x = torch.randn(6, 5, dtype=torch.float64)
    weights = torch.randn(6, 4, dtype=torch.float64)
    groups = {"weight": layer.weight, "bias": layer.bias}
    return check_groups(lambda: (layer(x) * weights).sum(), groups, eps)


def _check_dktau(eps: float) -> list[GroupResult]:
    torch.manual_seed(12)
    x = torch.randn(8, dtype=torch.float64)
    y = torch.randn(8, dtype=torch.float64)
    groups = {"x": x, "y": y}
    return check_groups(lambda: dktau(x, y, tau=0.1), groups, eps)


def _check_triplet(eps: float) -> list[GroupResult]:
    # fixed seed chosen so hinges are active and away from the kink
    torch.manual_seed(13)
    features = torch.randn(8, 4, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    groups = {"features": features}
    return check_groups(
        lambda: batch_hard_triplet(features, labels, margin=1.2), groups, eps
    )


def _check_ratr(eps: float) -> list[GroupResult]:
    torch.manual_seed(14)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    cfg = RatrConfig(tau=0.1, weight=1.0)
    f0 = torch.randn(6, 5, dtype=torch.float64)
    f1 = torch.randn(6, 5, dtype=torch.float64)

    def loss_fn():
        return ratr(build_similarity_views([f0, f1], labels), cfg)

    return check_groups(loss_fn, {"branch0": f0, "branch1": f1}, eps)


def _check_scan(eps: float) -> list[GroupResult]:
    torch.manual_seed(15)
    params = SsmParams(inner_dim=3, state_dim=2, conv_width=2, dtype=torch.float64)
    u = torch.randn(7, 3, dtype=torch.float64)
    delta = torch.rand(7, 3, dtype=torch.float64) + 0.05
    weights = torch.randn(7, 3, dtype=torch.float64)
    groups = {"u": u, "delta": delta}
    groups.update({f"param.{n}": p for n, p in params.named_parameters()})

    def loss_fn():
        return (selective_scan(u, delta, params, "forward") * weights).sum()

    return check_groups(loss_fn, groups, eps)


def _check_bimb(eps: float) -> list[GroupResult]:
    torch.manual_seed(16)
    block = BiMbBlock(embed_dim=4, inner_dim=6, state_dim=2, conv_width=2,
                      drop_rate=0.0, dtype=torch.float64)
    block.eval()
    x = torch.randn(5, 4, dtype=torch.float64)
    weights = torch.randn(5, 4, dtype=torch.float64)
    groups = dict(block.named_parameters())
    return check_groups(lambda: (block(x) * weights).sum(), groups, eps)


def _check_model(eps: float) -> list[GroupResult]:
    model = build_model(_tiny_model_config(), num_classes=3, seed=17)
    model.train()
    torch.manual_seed(18)
    images = torch.rand(6, 8, 8, 3, dtype=torch.float64)
    cams = torch.tensor([0, 1, 0, 1, 0, 1])
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    cfg = RatrConfig(tau=0.1, weight=1.0)

    def loss_fn():
        bundle = model(images, cams)
        loss, _ = total_loss(bundle, labels, margin=1.2, smoothing=0.1, ratr_cfg=cfg)
        return loss

    return check_groups(loss_fn, dict(model.named_parameters()), eps)


_TARGETS = {
    "linear": _check_linear,
    "dktau": _check_dktau,
    "triplet": _check_triplet,
    "ratr": _check_ratr,
    "scan": _check_scan,
    "bimb": _check_bimb,
    "model": _check_model,
}


def run_gradcheck(
    target: str, tolerance: float = 1e-3, eps: float = 1e-5
) -> GradCheckReport:
    """Check one selector; see ``gradcheck_targets`` for the available names."""
    if target not in _TARGETS:
        raise ValueError(
            f"unknown gradcheck selector {target!r}; choose from {sorted(_TARGETS)}"
        )
    groups = _TARGETS[target](eps)
    return GradCheckReport(target=target, tolerance=tolerance, groups=groups)


def gradcheck_targets() -> list[str]:
    return sorted(_TARGETS)
