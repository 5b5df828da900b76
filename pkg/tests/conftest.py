import numpy as np


def mc_mean_se(draw_fn, n_draws):
    """Mean and per-coordinate standard error over independent estimator draws.

    draw_fn(i) returns one gradient vector; draws are independent, so the
    standard error of the mean is std / sqrt(n).
    """
    draws = np.stack([draw_fn(i) for i in range(n_draws)])
    return draws.mean(axis=0), draws.std(axis=0, ddof=1) / np.sqrt(n_draws)
