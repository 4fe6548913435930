"""Test harness utilities that drive package code (kept apart from the pure oracles)."""
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from salanet.losses import total_loss
from salanet.network import build_network, forward, init_he_normal


def random_inputs(b=2, size=32, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 1, size, size, generator=g, dtype=dtype),
            torch.randn(b, 1, size, size, generator=g, dtype=dtype))


def random_targets(b=2, size=32, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 3, (b, size, size), generator=g), torch.randint(0, 3, (b, size, size), generator=g)


class ActivationPattern:
    """Records which side of every ReLU / max-pool kink the forward pass is on."""

    def __init__(self, net):
        self.pattern = []
        self.handles = [m.register_forward_pre_hook(self._hook) for m in net.modules()
                        if isinstance(m, (nn.ReLU, nn.MaxPool2d))]

    def _hook(self, module, inputs):
        x = inputs[0].detach()
        if isinstance(module, nn.ReLU):
            self.pattern.append(x > 0)
        else:
            self.pattern.append(F.max_pool2d(x, module.kernel_size, return_indices=True)[1])

    def take(self):
        out, self.pattern = self.pattern, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def gradient_check(cfg, n_params=100, seed=0, step=1e-5, size=16):
    """Autograd vs central differences on randomly sampled scalar parameters, float64.

    A sample whose +/- step evaluations land on different sides of a ReLU or
    max-pool kink is not differentiable at that resolution; it is skipped and
    replaced by another draw.  Returns (relative errors, number skipped).
    """
    torch.manual_seed(seed)
    net = init_he_normal(build_network(cfg), seed).double()
    sa, la = random_inputs(2, size, seed, torch.float64)
    sl, ll = random_targets(2, size, seed + 1)

    def loss():
        return total_loss(forward(net, sa, la, "train"), sl, ll).total

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = np.random.default_rng(seed).permutation(int(sizes.sum()))
    recorder = ActivationPattern(net)
    errors, skipped = [], 0
    with torch.no_grad():
        for f in order:
            if len(errors) == n_params:
                break
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p, i = params[k], int(f - offsets[k])
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + step
            up = loss().item()
            pattern_up = recorder.take()
            view[i] = orig - step
            down = loss().item()
            pattern_down = recorder.take()
            view[i] = orig
            if any(not torch.equal(a, b) for a, b in zip(pattern_up, pattern_down)):
                skipped += 1
                continue
            fd = (up - down) / (2 * step)
            g = p.grad.view(-1)[i].item()
            errors.append(abs(g - fd) / max(abs(g), abs(fd), 1e-7))
    recorder.close()
    return np.array(errors), skipped
