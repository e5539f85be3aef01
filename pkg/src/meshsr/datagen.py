"""Synthetic LR/HR datasets and MMD-based choice of which samples get HR labels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import SolverError, ValidationError
from .meshcore import FieldSample, Mesh, PairedSample, SplitDataset, UnpairedSample


# --- meshes -------------------------------------------------------------

def grid_positions(n):
    t = np.linspace(0.0, 1.0, n)
    x, y = np.meshgrid(t, t)  # row j holds y = t[j]
    return np.stack([x.ravel(), y.ravel()], axis=1)


def grid_edges(n):
    """4-connectivity plus the (i, j) -> (i+1, j+1) diagonal of every cell."""
    idx = np.arange(n * n).reshape(n, n)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    diag = np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()], axis=1)
    return np.concatenate([horiz, vert, diag], axis=0)


def grid_mesh(n, mesh_id=None):
    return Mesh(mesh_id or f"grid{n}", grid_positions(n), grid_edges(n))


# --- finite-difference Poisson --------------------------------------------

@dataclass
class PoissonSpec:
    """Gaussian-bump sources ``A exp(-|p - c|^2 / w^2)`` on the unit square, u = 0 on the boundary."""

    n_lr: int = 17
    n_hr: int = 33
    center_range: tuple = (0.25, 0.75)
    width_range: tuple = (0.08, 0.2)
    amplitude_range: tuple = (50.0, 150.0)
    tol: float = 1e-10
    omega: float = 1.9
    max_iter: int = 100_000

    def __post_init__(self):
        if self.n_lr < 3 or self.n_hr < self.n_lr or (self.n_hr - 1) % (self.n_lr - 1):
            raise ValidationError(
                f"HR grid {self.n_hr} must refine LR grid {self.n_lr}: (n_hr-1) % (n_lr-1) == 0")
        if self.tol <= 0:
            raise ValidationError("solver tolerance must be positive")
        if not 0 < self.omega < 2:
            raise ValidationError("SOR factor must lie in (0, 2)")

    def draw_mu(self, rng):
        cx, cy = rng.uniform(*self.center_range, size=2)
        w = rng.uniform(*self.width_range)
        a = rng.uniform(*self.amplitude_range)
        return np.array([cx, cy, w, a])


def gaussian_source(x, y, mu):
    cx, cy, w, a = mu
    return a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w ** 2)


def poisson_residual(u, f, h):
    """Max |5-point Laplacian(u) - f| over interior nodes."""
    lap = (u[1:-1, 2:] + u[1:-1, :-2] + u[2:, 1:-1] + u[:-2, 1:-1] - 4.0 * u[1:-1, 1:-1]) / (h * h)
    return float(np.max(np.abs(lap - f[1:-1, 1:-1]))) if lap.size else 0.0


def sor_poisson(f, h, omega=1.9, tol=1e-10, max_iter=100_000, check_every=10):
    """Red-black SOR for lap(u) = f with homogeneous Dirichlet data.

    ``f`` is sampled on the full (n x n) grid; returns ``(u, residual, iterations)``.
    """
    n = f.shape[0]
    u = np.zeros_like(f)
    jj, ii = np.meshgrid(np.arange(1, n - 1), np.arange(1, n - 1), indexing="ij")
    red = (ii + jj) % 2 == 0
    black = ~red
    h2f = h * h * f[1:-1, 1:-1]
    res = poisson_residual(u, f, h)
    it = 0
    while res > tol:
        if it >= max_iter:
            raise SolverError(f"SOR did not converge in {max_iter} iterations", res)
        for mask in (red, black):
            inner = u[1:-1, 1:-1]
            gs = 0.25 * (u[1:-1, 2:] + u[1:-1, :-2] + u[2:, 1:-1] + u[:-2, 1:-1] - h2f)
            inner[mask] += omega * (gs[mask] - inner[mask])
        it += 1
        if it % check_every == 0:
            res = poisson_residual(u, f, h)
    return u, res, it


def solve_poisson_fd(spec, mu, n, mesh=None, source=gaussian_source):
    """FD solution on an n x n grid as a :class:`FieldSample` (residual in ``.info``)."""
    mesh = mesh if mesh is not None else grid_mesh(n)
    h = 1.0 / (n - 1)
    t = np.linspace(0.0, 1.0, n)
    x, y = np.meshgrid(t, t)
    f = source(x, y, mu)
    u, res, iters = sor_poisson(f, h, spec.omega, spec.tol, spec.max_iter)
    sample = FieldSample(mesh, u.reshape(-1, 1), mu)
    sample.info = {"residual": res, "iterations": iters}
    return sample


def gen_poisson_dataset(spec, n, n_h, seed, n_test=20):
    """``n`` LR solves, HR solves for the first ``n_h`` of them plus ``n_test`` test pairs."""
    if not 2 <= n_h <= n:
        raise ValidationError(f"need 2 <= N_h <= N, got N_h={n_h}, N={n}")
    lr_mesh, hr_mesh = grid_mesh(spec.n_lr, "lr"), grid_mesh(spec.n_hr, "hr")
    paired, unpaired, test = [], [], []
    residuals = []
    for i in range(n + n_test):
        rng = np.random.default_rng([seed, i])
        mu = spec.draw_mu(rng)
        lr = solve_poisson_fd(spec, mu, spec.n_lr, lr_mesh)
        residuals.append(lr.info["residual"])
        if n_h <= i < n:
            unpaired.append(UnpairedSample(lr, hr_mesh))
            continue
        hr = solve_poisson_fd(spec, mu, spec.n_hr, hr_mesh)
        residuals.append(hr.info["residual"])
        (paired if i < n_h else test).append(PairedSample(lr, hr))
    provenance = {"kind": "poisson", "spec": asdict(spec), "seed": int(seed),
                  "max_residual": max(residuals)}
    return SplitDataset(paired, unpaired, test, provenance=provenance)


# --- jittered meshes with analytic fields ---------------------------------

@dataclass
class JitterSpec:
    """``a sin(pi kx x + phase) sin(pi ky y)`` on per-sample jittered grids."""

    n_lr: int = 9
    n_hr: int = 17
    jitter: float = 0.2
    smoothing: float = 0.5
    amplitude_range: tuple = (0.5, 2.0)
    kx_range: tuple = (0.5, 2.0)
    ky_range: tuple = (0.5, 2.0)
    phase_range: tuple = (0.0, np.pi)

    def __post_init__(self):
        if not 0 <= self.jitter < 0.5:
            raise ValidationError("jitter must lie in [0, 0.5) grid spacings")
        if not 0 <= self.smoothing <= 1:
            raise ValidationError("smoothing weight must lie in [0, 1]")

    def draw_mu(self, rng):
        return np.array([rng.uniform(*self.amplitude_range), rng.uniform(*self.kx_range),
                         rng.uniform(*self.ky_range), rng.uniform(*self.phase_range)])


def analytic_field(pos, mu):
    a, kx, ky, phase = mu
    return a * np.sin(np.pi * kx * pos[:, 0] + phase) * np.sin(np.pi * ky * pos[:, 1])


def jittered_mesh(n, amplitude, rng, mesh_id):
    pos = grid_positions(n)
    t = np.linspace(0.0, 1.0, n)
    interior = np.ones((n, n), dtype=bool)
    interior[[0, -1], :] = False
    interior[:, [0, -1]] = False
    interior = interior.ravel()
    shift = rng.uniform(-amplitude, amplitude, size=pos.shape) * (t[1] - t[0])
    pos[interior] += shift[interior]
    return Mesh(mesh_id, pos, grid_edges(n))


def ring_average(values, mesh, weight):
    """``(1 - weight) u_i + weight * mean of u over the 1-ring of i``."""
    if weight == 0:
        return values.copy()
    g = mesh.graph
    sums = np.zeros_like(values)
    np.add.at(sums, g.dst, values[g.src])
    deg = np.maximum(np.bincount(g.dst, minlength=mesh.n_nodes), 1)[:, None]
    return (1.0 - weight) * values + weight * sums / deg


def gen_jitter_dataset(spec, n, n_h, seed, n_test=10):
    if not 2 <= n_h <= n:
        raise ValidationError(f"need 2 <= N_h <= N, got N_h={n_h}, N={n}")
    paired, unpaired, test = [], [], []
    for i in range(n + n_test):
        rng = np.random.default_rng([seed, i])
        mu = spec.draw_mu(rng)
        lr_mesh = jittered_mesh(spec.n_lr, spec.jitter, rng, f"lr{i}")
        hr_mesh = jittered_mesh(spec.n_hr, spec.jitter, rng, f"hr{i}")
        u_lr = ring_average(analytic_field(lr_mesh.positions, mu)[:, None], lr_mesh, spec.smoothing)
        lr = FieldSample(lr_mesh, u_lr, mu)
        if n_h <= i < n:
            unpaired.append(UnpairedSample(lr, hr_mesh))
            continue
        hr = FieldSample(hr_mesh, analytic_field(hr_mesh.positions, mu)[:, None], mu)
        (paired if i < n_h else test).append(PairedSample(lr, hr))
    provenance = {"kind": "jitter", "spec": asdict(spec), "seed": int(seed)}
    return SplitDataset(paired, unpaired, test, provenance=provenance)


# --- MMD greedy selection ---------------------------------------------------

def lr_embeddings(samples, stats):
    """Flattened normalized LR fields, one row per sample."""
    sizes = {s.values.size for s in samples}
    if len(sizes) != 1:
        raise ValidationError("MMD embeddings need LR samples of equal size")
    return np.stack([stats.norm_values(s.values).ravel() for s in samples])


def _sq_dists(a, b):
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def median_bandwidth(x):
    d2 = _sq_dists(x, x)
    iu = np.triu_indices(x.shape[0], k=1)
    d = np.sqrt(d2[iu])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def rbf(a, b, bandwidth):
    return np.exp(-_sq_dists(a, b) / (2.0 * bandwidth ** 2))


def subset_mmd(pool, indices, bandwidth, reference=None):
    """MMD between ``pool[indices]`` and ``reference`` (the pool by default)."""
    ref = pool if reference is None else reference
    s = pool[np.asarray(indices, dtype=np.int64)]
    mmd2 = rbf(s, s, bandwidth).mean() - 2.0 * rbf(s, ref, bandwidth).mean() \
        + rbf(ref, ref, bandwidth).mean()
    return float(np.sqrt(max(mmd2, 0.0)))


def select_hr_mmd(pool, n_select, bandwidth=None, reference=None, seed=None):
    """Greedy kernel-herding choice of ``n_select`` rows of ``pool``.

    Each step adds the row that most lowers the squared MMD to ``reference``
    (default: the whole pool).  With ``seed`` the first row is drawn at random;
    without, it is chosen greedily too.  Returns ``(indices, mmd, history)``.
    """
    pool = np.asarray(pool, dtype=np.float64)
    n = pool.shape[0]
    if not 1 <= n_select <= n:
        raise ValidationError(f"cannot select {n_select} of {n} candidates")
    ref = pool if reference is None else np.asarray(reference, dtype=np.float64)
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([pool, ref]) if reference is not None else pool)
    k_cc = rbf(pool, pool, bandwidth)
    mean_ref = rbf(pool, ref, bandwidth).mean(axis=1)
    const = rbf(ref, ref, bandwidth).mean()
    diag = np.diag(k_cc).copy()

    chosen = []
    taken = np.zeros(n, dtype=bool)
    to_set = np.zeros(n)
    ss = cross = 0.0
    history = []
    for step in range(n_select):
        m = step + 1
        cand_ss = ss + 2.0 * to_set + diag
        cand_cross = cross + mean_ref
        score = cand_ss / m ** 2 - 2.0 * cand_cross / m + const
        score[taken] = np.inf
        if step == 0 and seed is not None:
            pick = int(np.random.default_rng(seed).integers(n))
        else:
            pick = int(np.argmin(score))
        chosen.append(pick)
        taken[pick] = True
        ss, cross = cand_ss[pick], cand_cross[pick]
        to_set += k_cc[:, pick]
        history.append(float(np.sqrt(max(ss / m ** 2 - 2.0 * cross / m + const, 0.0))))
    return np.array(chosen), history[-1], history
