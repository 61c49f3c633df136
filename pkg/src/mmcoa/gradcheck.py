"""Central finite-difference checks of autograd gradients.

Run these in float64: with step ``h`` the truncation error of a central
difference is O(h^2) while float32 round-off alone is ~1e-7 / h.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


@dataclass
class GradCheckResult:
    names: list[str]
    analytic: torch.Tensor
    numeric: torch.Tensor

    @property
    def relative_errors(self) -> torch.Tensor:
        scale = torch.maximum(self.analytic.abs(), self.numeric.abs())
        err = (self.analytic - self.numeric).abs()
        return torch.where(scale > 0, err / scale.clamp(min=1e-300), torch.zeros_like(err))

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_errors.max()) if len(self.names) else 0.0


def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, flat_index: int, step: float) -> float:
    """(f(t + h e_i) - f(t - h e_i)) / 2h, restoring ``tensor`` afterwards."""
    flat = tensor.data.view(-1)
    old = flat[flat_index].item()
    with torch.no_grad():
        flat[flat_index] = old + step
        plus = float(fn())
        flat[flat_index] = old - step
        minus = float(fn())
        flat[flat_index] = old
    return (plus - minus) / (2 * step)


def check_gradients(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], n_coords: int,
                    generator: torch.Generator, step: float = 1e-3) -> GradCheckResult:
    """Compare autograd against central differences on randomly drawn coordinates.

    A tensor is drawn with probability proportional to its size, then a
    coordinate uniformly inside it.
    """
    items = list(tensors.items())
    grads = torch.autograd.grad(fn(), [t for _, t in items], allow_unused=True)
    sizes = torch.tensor([t.numel() for _, t in items], dtype=torch.float64)
    names, analytic, numeric = [], [], []
    for _ in range(n_coords):
        k = int(torch.multinomial(sizes, 1, generator=generator))
        name, t = items[k]
        i = int(torch.randint(t.numel(), (1,), generator=generator))
        g = grads[k]
        analytic.append(0.0 if g is None else float(g.reshape(-1)[i]))
        numeric.append(central_difference(fn, t, i, step))
        names.append(f"{name}[{i}]")
    return GradCheckResult(names, torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64))
