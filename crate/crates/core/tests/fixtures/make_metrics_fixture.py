"""Regenerates the metrics fixture pair and its expected values with numpy/scipy."""

import json
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

HERE = Path(__file__).parent
K = 5


def write_csv(path, x):
    header = ",".join(f"z{j}" for j in range(x.shape[1]))
    rows = "\n".join(",".join(repr(float(v)) for v in row) for row in x)
    path.write_text(header + "\n" + rows + "\n")


def fd(a, b):
    mu_a, mu_b = a.mean(0), b.mean(0)
    s_a, s_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(s_a @ s_b).real
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a + s_b - 2 * covmean))


def kd(a, b):
    d = a.shape[1]
    k = lambda x, y: (x @ y.T / d + 1.0) ** 3
    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    n, m = len(a), len(b)
    return float(
        (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
        + (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
        - 2 * kab.mean()
    )


def density_coverage(gen, ref, k):
    rr = cdist(ref, ref, "sqeuclidean")
    radii = np.sort(rr, axis=1)[:, k]
    inside = cdist(gen, ref, "sqeuclidean") <= radii[None, :]
    return float(inside.sum() / (k * len(gen))), float(inside.any(axis=0).mean())


rng = np.random.default_rng(20240611)
a = rng.normal(size=(120, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 0.8, 0.2], [0.0, 0.0, 1.5]])
b = rng.normal(loc=[0.5, -0.2, 0.1], scale=[1.2, 0.7, 1.0], size=(150, 3))
write_csv(HERE / "metrics_a.csv", a)
write_csv(HERE / "metrics_b.csv", b)
density, coverage = density_coverage(a, b, K)
expected = {"fd": fd(a, b), "kd": kd(a, b), "density": density, "coverage": coverage, "k": K}
(HERE / "metrics_expected.json").write_text(json.dumps(expected, indent=2) + "\n")
