import numpy as np
import pytest

from finslerflow.geometry import DiscreteCurve


def random_polygon(rng: np.random.Generator, n: int, wobble: float = 0.45) -> DiscreteCurve:
    """Random star-shaped polygon: perturbed radii at sorted angles.

    Star-shaped construction guarantees simple, non-degenerate curves for any
    seed, which the geometric operators assume.
    """
    theta = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n))
    # keep consecutive angles separated so no edge collapses
    theta = (1.0 - 1e-3) * theta + 1e-3 * (2.0 * np.pi * np.arange(n) / n)
    radius = 1.0 + wobble * rng.uniform(-1.0, 1.0, size=n)
    nodes = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    center = rng.uniform(-1.0, 1.0, size=2)
    return DiscreteCurve(nodes + center)


def unit_square(n_per_side: int = 1) -> DiscreteCurve:
    """Unit square traversed counter-clockwise, optionally subdivided."""
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    if n_per_side == 1:
        return DiscreteCurve(corners)
    pts = []
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        for k in range(n_per_side):
            pts.append(a + (b - a) * k / n_per_side)
    return DiscreteCurve(np.array(pts))


def rigid_field(curve: DiscreteCurve, a: float, b: np.ndarray) -> np.ndarray:
    """Infinitesimal rigid deformation a * nodes^perp + b."""
    nodes = curve.nodes
    perp = np.stack([-nodes[:, 1], nodes[:, 0]], axis=1)
    return a * perp + np.asarray(b, dtype=float)


def similarity_field(curve: DiscreteCurve, alpha: float, beta: float, b: np.ndarray) -> np.ndarray:
    """Infinitesimal similarity deformation A * nodes + b, A = [[a,-b],[b,a]]."""
    mat = np.array([[alpha, -beta], [beta, alpha]])
    return curve.nodes @ mat.T + np.asarray(b, dtype=float)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
