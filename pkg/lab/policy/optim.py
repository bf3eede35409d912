"""
Functional AdamW
Decoupled weight decay with bias-corrected moments, written out over plain
name -> tensor mappings. The training loop uses torch.optim.AdamW; this is the
same update as a pure function, used to pin down the optimizer's semantics.
"""
from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch

from .exceptions import ShapeError

Tensors = Dict[str, torch.Tensor]


@dataclass
class AdamState:
    step: int = 0
    m: Tensors = field(default_factory=dict)
    v: Tensors = field(default_factory=dict)


def adamw_step(params: Tensors, grads: Tensors, state: AdamState, lr: float, wd: float,
               b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> Tuple[Tensors, AdamState]:
    """One update; returns new parameter tensors and a new state, inputs are left untouched."""
    if params.keys() != grads.keys():
        raise ShapeError("params and grads name different tensors")
    step = state.step + 1
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step

    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        decayed = p * (1.0 - lr * wd)
        new_params[name] = decayed - lr * (m / bc1) / ((v / bc2).sqrt() + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)
