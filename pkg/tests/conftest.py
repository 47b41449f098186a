import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ria import tensor as T
from ria.config import GeneratorConfig, tiny_config
from ria.data import generate_synthetic

settings.register_profile("ria", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ria")


def central_difference(fn, arrays, index, step=1e-4):
    """d fn / d arrays[index] by a 2-point central difference (independent of the autodiff)."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    for pos in np.ndindex(target.shape):
        keep = target[pos]
        target[pos] = keep + step
        up = fn(*base)
        target[pos] = keep - step
        down = fn(*base)
        target[pos] = keep
        out[pos] = (up - down) / (2 * step)
    return out


def autodiff(fn_tensor, arrays):
    """Analytic gradients of a scalar tensor expression with respect to every input."""
    leaves = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = fn_tensor(*leaves)
    loss.backward()
    return loss, [leaf.grad for leaf in leaves]


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_gen():
    return GeneratorConfig(n_users=7, n_items=11, n_categories=3, n_requests=40, m=3, n=5, L=2, T=6)


@pytest.fixture
def tiny_records(tiny_gen):
    return list(generate_synthetic(tiny_gen))


def param_grad_error(loss_fn, params, probes_per_param=6, step=1e-4, seed=0):
    """Max relative error between backward and a central difference on sampled entries of each param."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(probes_per_param, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + step
            with T.no_grad():
                up = loss_fn().item()
            flat[idx] = keep - step
            with T.no_grad():
                down = loss_fn().item()
            flat[idx] = keep
            fd = (up - down) / (2 * step)
            an = g.reshape(-1)[idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst


def randomize(module, seed=0, scale=0.3):
    """Give every parameter (zero-initialized ones included) generic random values."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data[...] = p.data + rng.uniform(-scale, scale, size=p.shape)
    return module
