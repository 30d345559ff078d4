"""Shared oracles for the policy and acceptance tests."""

import numpy as np

from migt import autodiff as ad
from migt.autodiff import Tensor
from migt.policy import AttentionConfig, MIGTPolicy, PolicyConfig

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def small_policy(variant="full", seed=0, n=2, f=4, d=8, heads=2, memory=4) -> MIGTPolicy:
    cfg = PolicyConfig(n, f, AttentionConfig(d, heads, 2 * d, memory), variant)
    return MIGTPolicy(cfg, seed=seed)


def perturb(policy: MIGTPolicy, seed: int, scale: float = 0.3) -> None:
    """Move every parameter off its structured init so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    for name, p in policy.params.items():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def whole_network_grad_error(policy: MIGTPolicy, states: np.ndarray, memory: np.ndarray | None, seed: int) -> float:
    """grad_check over every parameter at once, via one flat parameter vector."""
    names = sorted(policy.params)
    shapes = [policy.params[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    theta = np.concatenate([policy.params[k].data.reshape(-1) for k in names])
    rng = np.random.default_rng(seed + 1000)
    wl = rng.standard_normal(policy.config.n_actions)
    wv = float(rng.standard_normal())
    mask = None if memory is None else np.ones(memory.shape[:2], dtype=bool)

    def f(flat: Tensor) -> Tensor:
        params, off = {}, 0
        for name, shape, size in zip(names, shapes, sizes):
            params[name] = ad.reshape(flat[off:off + size], shape)
            off += size
        out = policy.forward(states, memory, mask, params=params)
        return (out.logits * Tensor(wl)).sum() + out.value.sum() * wv

    return ad.grad_check(f, theta, eps=1e-5)
