"""Independent oracles shared by the tests."""

import math

import numpy as np


def mm1_sojourn(mu, lam):
    return 1.0 / (mu - lam), 1.0 / (mu - lam) ** 2


def md1_sojourn_mean(t, lam):
    """M/D/1 sojourn: t + lam t^2 / (2 (1 - lam t))."""
    rho = lam * t
    return t + lam * t * t / (2 * (1 - rho))


def lst_sojourn_cumulants(lst_service, lam, mean_service, h=1e-3):
    """Mean and variance of the M/G/1 sojourn time from the P-K transform.

    Sojourn LST is (1-rho) s B(s) / (s - lam (1 - B(s))).  Its log has
    the sojourn cumulants as Taylor coefficients.
    """
    rho = lam * mean_service

    def log_lst(s):
        b = lst_service(s)
        return math.log((1 - rho) * s * b / (s - lam * (1 - b)))

    # log LST is analytic at 0 with value 0; central 5-point stencils
    fp1, fm1, fp2, fm2 = (log_lst(s) for s in (h, -h, 2 * h, -2 * h))
    d1 = (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h)
    d2 = (-fp2 + 16 * fp1 + 16 * fm1 - fm2) / (12 * h * h)
    return -d1, d2
