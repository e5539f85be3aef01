import numpy as np
import pytest

from meshsr import datagen, grad
from meshsr.meshcore import FieldSample, Mesh, PairedSample, SplitDataset, UnpairedSample


def path_mesh(n, mesh_id="path", spacing=1.0):
    pos = np.stack([np.arange(n) * spacing, np.zeros(n)], axis=1)
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return Mesh(mesh_id, pos, edges)


def square_mesh(mesh_id="sq"):
    """Four nodes on the unit square, triangulated with one diagonal."""
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    edges = np.array([[0, 1], [0, 2], [1, 3], [2, 3], [0, 3]])
    return Mesh(mesh_id, pos, edges)


def shared_mesh_dataset(n_paired=3, n_unpaired=2, n_test=1, d=1, seed=0):
    """Every LR and HR sample on the same 4-node mesh, with random values."""
    rng = np.random.default_rng(seed)
    mesh = square_mesh()

    def pair(i):
        mu = np.array([float(i)])
        lr = FieldSample(mesh, rng.normal(size=(4, d)), mu)
        return PairedSample(lr, FieldSample(mesh, lr.values + 0.3 * rng.normal(size=(4, d)), mu))

    paired = [pair(i) for i in range(n_paired)]
    unpaired = [UnpairedSample(FieldSample(mesh, rng.normal(size=(4, d)), [100.0 + i]), mesh)
                for i in range(n_unpaired)]
    test = [pair(200 + i) for i in range(n_test)]
    return SplitDataset(paired, unpaired, test)


def jittered_rect(nx, ny, mesh_id, rng, jitter=0.15):
    """Slightly perturbed nx-by-ny grid on the unit square, triangulated."""
    xs, ys = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny))
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
    pos = pos + rng.uniform(-jitter, jitter, size=pos.shape) / max(nx, ny)
    edges = []
    for j in range(ny):
        for i in range(nx):
            a = j * nx + i
            if i + 1 < nx:
                edges.append((a, a + 1))
            if j + 1 < ny:
                edges.append((a, a + nx))
            if i + 1 < nx and j + 1 < ny:
                edges.append((a, a + nx + 1))
    return Mesh(mesh_id, pos, np.array(edges))


def two_mesh_dataset(seed=0):
    """Small jittered dataset: every sample has its own LR and HR mesh."""
    spec = datagen.JitterSpec(n_lr=3, n_hr=4)
    return datagen.gen_jitter_dataset(spec, 6, 4, seed, n_test=1)


def brute_knn(src, p, k):
    d = np.sqrt(((src - p) ** 2).sum(axis=1))
    order = sorted(range(len(src)), key=lambda i: (d[i], i))[:k]
    return [(i, d[i]) for i in order]


def brute_interpolate(values, src, dst, k):
    out = np.zeros((len(dst), values.shape[1]))
    for t, p in enumerate(dst):
        nbrs = brute_knn(src, p, k)
        if nbrs[0][1] < 1e-12:
            out[t] = values[nbrs[0][0]]
            continue
        w = np.array([1.0 / d ** 2 for _, d in nbrs])
        out[t] = sum(wi * values[i] for wi, (i, _) in zip(w, nbrs)) / w.sum()
    return out


def relu_margin(fn):
    """Smallest |pre-activation| reaching any ReLU while ``fn()`` runs.

    Finite differences are only meaningful away from ReLU kinks, so gradient
    checks pick configurations with a comfortable margin.
    """
    seen = []
    original = grad.relu

    def spy(a):
        a = grad.as_tensor(a)
        seen.append(np.abs(a.data).min() if a.data.size else np.inf)
        return original(a)

    grad.relu = spy
    try:
        fn()
    finally:
        grad.relu = original
    return min(seen, default=np.inf)


def random_rescale(named_params, rng, bias_scale=0.1):
    """Unit-gain normal weights and small random biases, in place.

    Keeps activations of order one through deep stacks, so ReLU inputs stay
    clear of zero and finite-difference roundoff stays small.
    """
    for _, p in named_params:
        if p.data.ndim == 2:
            p.data[:] = rng.normal(size=p.shape) * np.sqrt(1.0 / p.shape[0])
        else:
            p.data[:] = rng.normal(size=p.shape) * bias_scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def poisson_small():
    return datagen.gen_poisson_dataset(datagen.PoissonSpec(), 12, 4, 0, n_test=3)


# acceptance criteria report: test name -> detail line recorded by the test
ACCEPTANCE_DETAILS = {}


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance.py::" in rep.nodeid:
                name = rep.nodeid.split("::")[-1]
                detail = ACCEPTANCE_DETAILS.get(name, "")
                lines.append((name, f"{name}: {outcome.upper()[:4]}  {detail}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
