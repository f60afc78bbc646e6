import numpy as np

from radnet import tensor as T


def projected(out: T.Tensor, seed: int = 123) -> T.Tensor:
    """Scalar ``sum(out * R)`` with a fixed random ``R``; keeps every output coordinate in play."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, out.shape) * np.where(rng.random(out.shape) < 0.5, -1, 1)
    return T.tensor_sum(T.mul(out, T.Tensor(r)))


def away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape)
    return x * np.where(rng.random(shape) < 0.5, -1, 1)

