"""Central-difference checking for piecewise-smooth networks.

ReLU and max routing make the loss non-differentiable on a measure-zero set.
A central difference straddling such a kink is not a valid oracle, so each
probe first compares the routing pattern at ``theta - h`` and ``theta + h``
with the one at ``theta`` and only scores probes where all three agree.
"""
import numpy as np

from gwanomaly.autodiff import Tape, backward

KINKED = ("relu", "max", "maxpool1d")


def value_and_pattern(loss_fn) -> tuple[float, bytes]:
    """Loss value and the on/off routing of every kinked op on the tape."""
    with Tape() as tape:
        value = loss_fn().item()
        parts = []
        for node in tape.nodes:
            if node.kind in KINKED:
                route = node.backward_fn(np.ones(node.out_shape), node.needs)[0]
                parts.append(np.asarray(route != 0).tobytes())
        tape.clear()
    return value, b"".join(parts)


def analytic_grads(loss_fn, params: dict) -> dict:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        backward(loss_fn(), tape)
        tape.clear()
    return {k: np.array(p.grad) for k, p in params.items()}


def check(loss_fn, params: dict, h: float = 1e-4, coords=None):
    """Max relative error over smooth probes and the number of skipped probes.

    ``coords`` is an iterable of ``(name, flat_index)``; default is every element.
    """
    grads = analytic_grads(loss_fn, params)
    _, base = value_and_pattern(loss_fn)
    if coords is None:
        coords = [(k, i) for k, p in params.items() for i in range(p.size)]
    worst, skipped, scored = 0.0, 0, 0
    for name, i in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up, pat_up = value_and_pattern(loss_fn)
        flat[i] = orig - h
        down, pat_down = value_and_pattern(loss_fn)
        flat[i] = orig
        if pat_up != base or pat_down != base:
            skipped += 1
            continue
        a = grads[name].reshape(-1)[i]
        n = (up - down) / (2 * h)
        worst = max(worst, abs(a - n) / max(1.0, abs(a)))
        scored += 1
    return worst, skipped, scored
