"""Bayesian belief updates for the Defender's inference over Attacker types."""
from __future__ import annotations

from typing import Sequence

import numpy as np

ZERO_LIKELIHOOD = 1e-15


class OffEquilibriumObservation(ValueError):
    """The observed action has zero probability under every type's strategy."""


def update_belief(b: np.ndarray, policies_at_h: np.ndarray, a: int) -> np.ndarray:
    """Posterior after observing ``a``; ``policies_at_h[theta]`` is type theta's action distribution."""
    b = np.asarray(b, dtype=float)
    joint = b * np.asarray(policies_at_h, dtype=float)[:, a]
    chi = joint.sum()
    if chi <= ZERO_LIKELIHOOD:
        raise OffEquilibriumObservation(f"action {a} has total likelihood {chi:.3g}")
    return joint / chi


def iterated_belief(prior: np.ndarray, policies: np.ndarray, states: Sequence[int],
                    actions: Sequence[int]) -> np.ndarray:
    """Repeated one-step updates; ``policies[theta, s]`` is a state-level action distribution."""
    b = np.asarray(prior, dtype=float)
    for s, a in zip(states, actions):
        b = update_belief(b, policies[:, s], a)
    return b


def belief_product_form(prior: np.ndarray, policies: np.ndarray, states: Sequence[int],
                        actions: Sequence[int]) -> np.ndarray:
    """Posterior from the prior times the product of action likelihoods along the trajectory."""
    prior = np.asarray(prior, dtype=float)
    like = np.ones_like(prior)
    for s, a in zip(states, actions):
        like = like * policies[:, s, a]
    joint = prior * like
    total = joint.sum()
    if not total > 0.0:
        raise OffEquilibriumObservation(f"trajectory has total likelihood {total:.3g}")
    return joint / total
