"""Central-difference oracle for the model's analytic gradients."""
import numpy as np

from mercpt import model as lm


def fd_coordinate(params: lm.ModelParams, batch, field: str, index, h: float = 1e-5) -> float:
    arr = getattr(params, field)
    orig = arr[index]
    arr[index] = orig + h
    plus = lm.loss(params, batch)
    arr[index] = orig - h
    minus = lm.loss(params, batch)
    arr[index] = orig
    return (plus - minus) / (2 * h)


def max_relative_error(params, batch, n_coords: int, rng, h: float = 1e-5) -> float:
    _, grads = lm.loss_and_grad(params, batch)
    sizes = np.array([a.size for a in params.arrays()])
    worst = 0.0
    for _ in range(n_coords):
        k = rng.choice(len(sizes), p=sizes / sizes.sum())
        field = lm.PARAM_FIELDS[k]
        arr = getattr(params, field)
        index = np.unravel_index(rng.integers(arr.size), arr.shape)
        numeric = fd_coordinate(params, batch, field, index, h)
        analytic = getattr(grads, field)[index]
        worst = max(worst, abs(analytic - numeric) / (abs(analytic) + 1e-8))
    return worst
