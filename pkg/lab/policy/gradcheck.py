"""
Gradient Check
Compares reverse-mode gradients against central finite differences on a
sample of coordinates that covers every parameter tensor. Meant to be run on a
tiny config cast to float64.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np
import torch

logger = logging.getLogger(__name__)

RELATIVE_FLOOR = 1e-2


@dataclass
class CoordinateCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        a, n = abs(self.analytic), abs(self.numeric)
        return abs(self.analytic - self.numeric) / max(a, n, RELATIVE_FLOOR)


@dataclass
class GradCheckReport:
    checks: List[CoordinateCheck] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.checks)

    @property
    def per_tensor(self) -> Dict[str, float]:
        worst: Dict[str, float] = {}
        for c in self.checks:
            worst[c.name] = max(worst.get(c.name, 0.0), c.rel_error)
        return worst

    @property
    def per_group(self) -> Dict[str, float]:
        """Worst error per top-level module (image_encoder, qformer, backbone, head, ...)."""
        worst: Dict[str, float] = {}
        for name, err in self.per_tensor.items():
            group = name.split(".", 1)[0]
            worst[group] = max(worst.get(group, 0.0), err)
        return worst

    @property
    def worst(self) -> Optional[CoordinateCheck]:
        return max(self.checks, key=lambda c: c.rel_error, default=None)

    @property
    def max_rel_error(self) -> float:
        worst = self.worst
        return worst.rel_error if worst is not None else 0.0

    def summary(self) -> str:
        worst = self.worst
        if worst is None:
            return "no parameters checked"
        return (f"{len(self.checks)} coordinates, max rel err {worst.rel_error:.3e} "
                f"at {worst.name}{list(worst.index)}")


def _sample_coordinates(params: Mapping[str, torch.Tensor], n_coords: int,
                        generator: torch.Generator) -> List[tuple]:
    names = list(params)
    # One coordinate per tensor first, then uniform over all coordinates.
    picks = []
    for name in names:
        flat = int(torch.randint(params[name].numel(), (1,), generator=generator))
        picks.append((name, flat))
    sizes = torch.tensor([params[n].numel() for n in names], dtype=torch.float64)
    extra = max(n_coords - len(picks), 0)
    if extra:
        owners = torch.multinomial(sizes, extra, replacement=True, generator=generator)
        for owner in owners.tolist():
            name = names[owner]
            picks.append((name, int(torch.randint(params[name].numel(), (1,), generator=generator))))
    return picks


def grad_check(params: Mapping[str, torch.nn.Parameter], loss_fn: Callable[[], torch.Tensor],
               eps_fd: float = 1e-3, n_coords: int = 200, seed: int = 0) -> GradCheckReport:
    """
    `loss_fn` must be deterministic (fixed batch, timesteps and noise) and read
    the parameters in `params`.
    """
    params = {name: p for name, p in params.items() if p.requires_grad}
    if not params:
        return GradCheckReport()

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params.items()}

    generator = torch.Generator().manual_seed(seed)
    report = GradCheckReport()
    with torch.no_grad():
        for name, flat in _sample_coordinates(params, n_coords, generator):
            p = params[name]
            view = p.view(-1)
            original = view[flat].item()
            view[flat] = original + eps_fd
            plus = float(loss_fn())
            view[flat] = original - eps_fd
            minus = float(loss_fn())
            view[flat] = original
            index = tuple(int(i) for i in np.unravel_index(flat, tuple(p.shape)))
            report.checks.append(CoordinateCheck(
                name=name, index=index,
                analytic=float(analytic[name].view(-1)[flat]),
                numeric=(plus - minus) / (2.0 * eps_fd),
            ))
    logger.info("Gradient check: %s", report.summary())
    return report
