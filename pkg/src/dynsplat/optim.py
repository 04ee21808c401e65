"""Adam with per-group learning rates and row surgery for densify/prune."""

from __future__ import annotations

import math

import torch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


class Adam:
    """Adam over named leaf tensors.

    Moment arrays track parameter shapes through row-level surgery (keep/append)
    so Gaussians can be cloned, split, and pruned mid-training. The step count
    is global; newly added rows start with zeroed moments.
    """

    def __init__(self, params: dict[str, torch.Tensor], lrs: dict[str, float]):
        self.params = dict(params)
        self.lrs = dict(lrs)
        for name in self.params:
            if name not in self.lrs:
                raise KeyError(f"no learning rate for parameter group {name!r}")
        self.m = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in self.params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        bc1 = 1.0 - BETA1 ** self.step_count
        bc2 = 1.0 - BETA2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
            v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
            denom = (v / bc2).sqrt_().add_(EPS)
            p.data.addcdiv_(m, denom, value=-self.lrs[name] / bc1)

    def set_lr(self, name: str, lr: float):
        self.lrs[name] = lr

    @torch.no_grad()
    def keep_rows(self, name: str, keep: torch.Tensor, new_param: torch.Tensor):
        """Replace a parameter with a row subset; moments follow."""
        self.m[name] = self.m[name][keep]
        self.v[name] = self.v[name][keep]
        self.params[name] = new_param

    @torch.no_grad()
    def append_rows(self, name: str, new_param: torch.Tensor, n_new: int):
        """Replace a parameter grown by n_new rows; new moments start at zero."""
        pad = new_param.shape[0] - n_new
        zeros = torch.zeros((n_new,) + tuple(self.m[name].shape[1:]), dtype=self.m[name].dtype)
        self.m[name] = torch.cat([self.m[name][:pad], zeros])
        self.v[name] = torch.cat([self.v[name][:pad], zeros.clone()])
        self.params[name] = new_param


def exponential_lr(initial: float, final_mult: float, step: int, total: int) -> float:
    """Exponential decay from `initial` to `initial * final_mult` over `total` steps."""
    if total <= 0:
        return initial
    frac = min(max(step / total, 0.0), 1.0)
    return initial * math.exp(frac * math.log(final_mult))
