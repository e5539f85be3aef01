import csv
import math

import numpy as np
import pytest

from conftest import (brute_interpolate, jittered_rect, random_rescale, relu_margin,
                      shared_mesh_dataset, square_mesh, two_mesh_dataset)
from meshsr import datagen, grad
from meshsr.errors import ConfigError, ContractError, DivergenceError, ValidationError
from meshsr.grad import Tensor
from meshsr.meshcore import FieldSample, PairedSample, SplitDataset, UnpairedSample
from meshsr.models import (Architecture, ModelParams, extract, forward_f, forward_g,
                           load_checkpoint, target_g)
from meshsr.train import (LOSS_KEYS, METRIC_COLUMNS, RunMetrics, TrainConfig,
                          complementary_losses, evaluate_rmse, knn_baseline_rmse,
                          probe_loss_landscape, probe_point, rmse_report, run_training,
                          step_complementary, step_supervised, supervised_loss, total_loss,
                          write_metrics_csv)


def tiny_params(ds, kind="mgn", hidden=4, seed=0, rescale=True):
    arch = Architecture(kind=kind, hidden=hidden, n_lr_layers=1, n_hr_layers=1, d=ds.d, dim=ds.dim)
    params = ModelParams.init(arch, ds.stats, seed)
    if rescale:
        random_rescale(params.named_parameters(), np.random.default_rng(seed))
    return params


def tiny_config(**kw):
    base = dict(hidden=4, n_lr_layers=1, n_hr_layers=1, max_epochs=3, patience=10,
                steps_per_epoch=2, val_fraction=0.0)
    base.update(kw)
    return TrainConfig(**base)


def small_two_mesh_dataset(seed=0):
    """Each sample on its own 4-node LR and 6-node HR mesh."""
    rng = np.random.default_rng(seed)

    def pair(i):
        mu = [float(i)]
        lr_mesh = jittered_rect(2, 2, f"lr{i}", rng)
        hr_mesh = jittered_rect(3, 2, f"hr{i}", rng)
        lr = FieldSample(lr_mesh, rng.normal(size=(4, 1)), mu)
        return PairedSample(lr, FieldSample(hr_mesh, rng.normal(size=(6, 1)), mu))

    paired = [pair(i) for i in range(3)]
    extra = pair(3)
    return SplitDataset(paired, [UnpairedSample(extra.lr, extra.hr.mesh)])


def copy_dataset(base, offset=0.0):
    """HR truth equal to kNN upsampling of the LR field, plus ``offset`` normalized units."""
    stats = base.stats

    def fix(p):
        up = brute_interpolate(p.lr.values, p.lr.mesh.positions, p.hr.mesh.positions, 3)
        return PairedSample(p.lr, FieldSample(p.hr.mesh, up + offset * stats.field_std, p.lr.mu))

    return SplitDataset([fix(p) for p in base.paired], list(base.unpaired),
                        [fix(p) for p in base.test], stats)


def mse(a, b, w=None):
    r = (np.asarray(a) - np.asarray(b)) ** 2
    return float(np.mean(r if w is None else r * np.asarray(w)))


# --- loss assembly ------------------------------------------------------------

@pytest.mark.parametrize("weights", [None, [3.0, 0.5]])
def test_losses_match_projection_free_reference(weights):
    ds = shared_mesh_dataset(n_paired=3, n_unpaired=1, d=2, seed=5)
    params = tiny_params(ds)
    norm = ds.stats.norm_values
    alpha, beta, gamma = ds.paired[0], ds.paired[2], ds.unpaired[0]
    mesh = square_mesh()

    # every projection is the identity on a shared mesh, so the equations need none
    def f(lr):
        return (params.decoder_f(extract(params.shared, lr, mesh)).data + norm(lr.values))

    def g(lr_r, lr_s):
        diff = extract(params.shared, lr_r, mesh).data - extract(params.shared, lr_s, mesh).data
        return params.decoder_g(Tensor(diff)).data + norm(lr_r.values) - norm(lr_s.values)

    u_a, u_b = norm(alpha.hr.values), norm(beta.hr.values)
    f_a, f_b, f_g = f(alpha.lr), f(beta.lr), f(gamma.lr)
    g_ab, g_ga, g_bg = g(alpha.lr, beta.lr), g(gamma.lr, alpha.lr), g(beta.lr, gamma.lr)
    w = weights
    expected = {
        "l_f_sup": mse(f_a, u_a, w) + mse(f_b, u_b, w),
        "l_g_sup": mse(g_ab, u_a - u_b, w),
        "l_f_unsup": mse(f_g, g_ga + u_a, w) + mse(f_g, u_b - g_bg, w),
        "l_g_unsup": mse(g_ga, f_g - u_a, w) + mse(g_bg, u_b - f_g, w),
    }
    losses = complementary_losses(params, alpha, beta, gamma, weights)
    for key in LOSS_KEYS:
        assert abs(float(losses[key].data) - expected[key]) <= 1e-12, key
    assert abs(float(total_loss(losses).data) - sum(expected.values())) <= 1e-12


def test_step_reports_total_as_sum_of_terms():
    ds = two_mesh_dataset(seed=2)
    params = tiny_params(ds)
    state = grad.AdamState.for_params(params.parameters())
    for i in range(3):
        batch = (ds.paired[i % 3], ds.paired[(i + 1) % 3], ds.unpaired[i % len(ds.unpaired)])
        vals = step_complementary(params, batch, state)
        assert abs(vals["total"] - sum(vals[k] for k in LOSS_KEYS)) <= 1e-12


def test_gamma_equal_to_alpha_with_zero_decoders():
    ds = shared_mesh_dataset(n_paired=3, n_unpaired=1, seed=3)
    params = tiny_params(ds, rescale=False)
    norm = ds.stats.norm_values
    alpha, beta = ds.paired[0], ds.paired[1]
    gamma = UnpairedSample(alpha.lr, alpha.hr.mesh)
    losses = complementary_losses(params, alpha, beta, gamma)
    # G(gamma, alpha) vanishes and F(gamma) is the upsampled LR field of alpha
    first = mse(np.zeros_like(alpha.hr.values), norm(alpha.lr.values) - norm(alpha.hr.values))
    second = mse(norm(beta.lr.values) - norm(alpha.lr.values),
                 norm(beta.hr.values) - norm(alpha.lr.values))
    assert abs(float(losses["l_g_unsup"].data) - (first + second)) <= 1e-12


def test_zero_decoder_supervised_loss_is_knn_mse():
    ds = two_mesh_dataset(seed=1)
    params = tiny_params(ds, rescale=False)
    norm = ds.stats.norm_values
    alpha, beta = ds.paired[0], ds.paired[1]

    def knn_mse(p):
        up = brute_interpolate(norm(p.lr.values), p.lr.mesh.positions, p.hr.mesh.positions, 3)
        return mse(up, norm(p.hr.values))

    losses = complementary_losses(params, alpha, beta, ds.unpaired[0])
    assert float(losses["l_f_sup"].data) == pytest.approx(knn_mse(alpha) + knn_mse(beta),
                                                          rel=1e-12)
    assert float(supervised_loss(params, alpha).data) == pytest.approx(knn_mse(alpha), rel=1e-12)


def test_perfect_copy_dataset_has_zero_loss():
    ds = copy_dataset(two_mesh_dataset(seed=4))
    params = tiny_params(ds, rescale=False)
    for p in ds.paired:
        assert float(supervised_loss(params, p).data) <= 1e-24


def test_no_unpaired_sample_drops_unsupervised_terms():
    ds = two_mesh_dataset(seed=6)
    params = tiny_params(ds)
    alpha, beta = ds.paired[0], ds.paired[1]
    losses = complementary_losses(params, alpha, beta, None)
    assert float(losses["l_f_unsup"].data) == 0.0 and float(losses["l_g_unsup"].data) == 0.0
    expected = (float(supervised_loss(params, alpha).data)
                + float(supervised_loss(params, beta).data))
    assert float(losses["l_f_sup"].data) == pytest.approx(expected, rel=1e-14)


def test_unpaired_samples_carry_no_hr_field():
    ds = two_mesh_dataset()
    assert all(not hasattr(u, "hr") for u in ds.unpaired)


@pytest.mark.parametrize("make", [lambda: shared_mesh_dataset(3, 1, seed=7),
                                  lambda: small_two_mesh_dataset(seed=7)])
def test_total_loss_gradcheck(make):
    ds = make()
    alpha, beta, gamma = ds.paired[0], ds.paired[1], ds.unpaired[0]

    def loss(params):
        return total_loss(complementary_losses(params, alpha, beta, gamma))

    for seed in range(100):
        params = tiny_params(ds, seed=seed)
        if relu_margin(lambda: loss(params)) > 1e-4:
            break
    scale = 1.0 / float(loss(params).data)
    err = grad.gradcheck(lambda: grad.scale(loss(params), scale), params.parameters())
    assert err <= 1e-5


# --- single steps ----------------------------------------------------------------

def test_supervised_step_leaves_auxiliary_decoder():
    ds = two_mesh_dataset(seed=8)
    params = tiny_params(ds)
    before = {name: p.data.copy() for name, p in params.named_parameters()}
    state = grad.AdamState.for_params(params.f_parameters())
    step_supervised(params, ds.paired[0], state)
    for name, p in params.named_parameters():
        moved = not np.array_equal(p.data, before[name])
        if name.startswith("decoder_g"):
            assert not moved, name
    assert not np.array_equal(params.decoder_f.weights[0].data, before["decoder_f.w0"])


def test_complementary_step_updates_every_parameter():
    ds = two_mesh_dataset(seed=8)
    params = tiny_params(ds)
    before = [p.data.copy() for p in params.parameters()]
    state = grad.AdamState.for_params(params.parameters())
    step_complementary(params, (ds.paired[0], ds.paired[1], ds.unpaired[0]), state)
    changed = [not np.array_equal(p.data, b) for p, b in zip(params.parameters(), before)]
    assert sum(changed) >= 0.9 * len(changed)
    assert state.t == 1


def test_divergence_aborts_with_snapshot(tmp_path):
    ds = two_mesh_dataset(seed=9)
    params = tiny_params(ds)
    state = grad.AdamState.for_params(params.parameters())
    batch = (ds.paired[0], ds.paired[1], ds.unpaired[0])
    with pytest.raises(DivergenceError) as info:
        step_complementary(params, batch, state, threshold=1e-12, dump_dir=tmp_path)
    assert info.value.dump_path is not None
    dumped = load_checkpoint(info.value.dump_path)
    assert [p.data.tobytes() for p in dumped.parameters()] == \
        [p.data.tobytes() for p in params.parameters()]
    assert state.t == 0


def test_divergence_on_non_finite_loss():
    ds = two_mesh_dataset(seed=9)
    params = tiny_params(ds)
    params.decoder_f.biases[-1].data[:] = np.nan
    state = grad.AdamState.for_params(params.f_parameters())
    with pytest.raises(DivergenceError):
        step_supervised(params, ds.paired[0], state)


# --- evaluation ---------------------------------------------------------------------

def test_rmse_identity_and_offset():
    base = two_mesh_dataset(seed=10)
    params = tiny_params(base, rescale=False)
    assert evaluate_rmse(params, copy_dataset(base).paired) <= 1e-12
    for c in (0.5, -1.25):
        assert evaluate_rmse(params, copy_dataset(base, c).paired) == pytest.approx(abs(c),
                                                                                    abs=1e-12)


def test_rmse_matches_batch_oracle():
    ds = two_mesh_dataset(seed=11)
    params = tiny_params(ds)
    norm = ds.stats.norm_values
    errors = np.concatenate([forward_f(params, p.lr, p.hr.mesh).data - norm(p.hr.values)
                             for p in ds.paired + ds.test])
    expected = math.sqrt(np.mean(errors ** 2))
    assert evaluate_rmse(params, ds.paired + ds.test) == pytest.approx(expected, rel=1e-12)


def test_zero_decoder_rmse_equals_knn_baseline():
    ds = two_mesh_dataset(seed=12)
    params = tiny_params(ds, rescale=False)
    pairs = ds.paired + ds.test
    assert abs(evaluate_rmse(params, pairs) - knn_baseline_rmse(pairs, ds.stats)) <= 1e-12
    report = rmse_report(params, pairs)
    assert report["n_samples"] == len(pairs) and len(report["per_column"]) == ds.d


def test_rmse_empty_set():
    ds = two_mesh_dataset()
    with pytest.raises(ContractError):
        evaluate_rmse(tiny_params(ds), [])


# --- configuration ----------------------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "complementary", "bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(mpnn="gcn", message_centering=True).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(loss_weights=[1.0, 1.0]).validate(d=1)


def test_validation_split_must_leave_two_pairs():
    ds = shared_mesh_dataset(n_paired=3)
    with pytest.raises(ValidationError):
        run_training(tiny_config(val_fraction=0.1), ds)


def test_config_round_trip():
    cfg = tiny_config(seed=3, loss_weights=[2.0])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- training loop -------------------------------------------------------------------

def test_patience_zero_runs_one_epoch():
    ds = shared_mesh_dataset(n_paired=4, n_unpaired=2)
    _, metrics = run_training(tiny_config(patience=0, max_epochs=5, val_fraction=0.5), ds)
    assert len(metrics.epochs) == 1 and metrics.best_epoch == 1


def test_same_seed_is_bitwise_reproducible():
    ds = two_mesh_dataset(seed=13)
    cfg = tiny_config(val_fraction=0.5, max_epochs=2)
    p1, m1 = run_training(cfg, ds)
    p2, m2 = run_training(cfg, ds)
    assert [repr(r) for r in m1.epochs] == [repr(r) for r in m2.epochs]
    assert [p.data.tobytes() for p in p1.parameters()] == [p.data.tobytes() for p in p2.parameters()]
    p3, _ = run_training(tiny_config(val_fraction=0.5, max_epochs=2, seed=1), ds)
    assert [p.data.tobytes() for p in p1.parameters()] != [p.data.tobytes() for p in p3.parameters()]


def test_early_stopping_returns_best_snapshot():
    ds = two_mesh_dataset(seed=14)
    snaps = {}
    cfg = tiny_config(val_fraction=0.5, max_epochs=8, patience=3, lr=0.05)
    params, metrics = run_training(cfg, ds, on_epoch=lambda e, p: snaps.update({e: p.snapshot()}))
    vals = metrics.column("val_rmse")
    assert metrics.best_val_rmse == min(vals)
    assert metrics.best_epoch == vals.index(min(vals)) + 1
    for got, want in zip(params.snapshot(), snaps[metrics.best_epoch]):
        np.testing.assert_array_equal(got, want)
    assert metrics.test_rmse is not None and metrics.knn_test_rmse is not None


def test_empty_unpaired_pool_matches_supervised_plus_difference_loss():
    ds = two_mesh_dataset(seed=15).paired_only()
    cfg = tiny_config(val_fraction=0.5, max_epochs=1, steps_per_epoch=4)
    trained, _ = run_training(cfg, ds)

    # replay the trainer's draws with a hand-assembled loss
    init, split, sample = np.random.SeedSequence(cfg.seed).spawn(3)
    params = ModelParams.init(cfg.architecture(ds.d, ds.dim), ds.stats,
                              int(init.generate_state(1)[0]))
    order = np.random.default_rng(split).permutation(len(ds.paired))
    train_pairs = [ds.paired[i] for i in sorted(order[2:].tolist())]
    rng = np.random.default_rng(sample)
    plist = params.parameters()
    state = cfg.adam(plist)
    for _ in range(4):
        a, b = rng.choice(len(train_pairs), size=2, replace=False)
        alpha, beta = train_pairs[a], train_pairs[b]
        with grad.Tape() as tape:
            tape.watch(plist)
            g = forward_g(params, alpha.lr, beta.lr, alpha.hr.mesh, beta.hr.mesh)
            loss = grad.add(grad.add(supervised_loss(params, alpha), supervised_loss(params, beta)),
                            grad.mse(g, target_g(alpha.hr, beta.hr, stats=ds.stats)))
            grads = grad.backward(loss, plist)
        grad.adam_step(plist, grads, state)
    for got, want in zip(trained.parameters(), plist):
        # same arithmetic, different gradient accumulation order
        np.testing.assert_allclose(got.data, want.data, rtol=1e-10, atol=1e-12)


def test_supervised_training_reduces_loss():
    spec = datagen.PoissonSpec(n_lr=5, n_hr=9)
    ds = datagen.gen_poisson_dataset(spec, 4, 4, 0, n_test=1).paired_only()
    full = []

    def on_epoch(epoch, params):
        full.append(sum(float(supervised_loss(params, p).data) for p in ds.paired))

    cfg = TrainConfig(mode="supervised", hidden=8, n_lr_layers=1, n_hr_layers=1, max_epochs=200,
                      patience=1000, lr=1e-4)
    run_training(cfg, ds, on_epoch=on_epoch)
    drops = np.diff(full) < 0
    assert full[-1] < 0.9 * full[0]
    assert drops.mean() >= 0.9


def test_run_metrics_reject_non_finite():
    m = RunMetrics()
    with pytest.raises(ContractError):
        m.add_epoch({"epoch": 1, "l_f_sup": float("nan")}, 0.1)


def test_metrics_csv_round_trip(tmp_path):
    ds = two_mesh_dataset(seed=16)
    _, metrics = run_training(tiny_config(val_fraction=0.5, max_epochs=2), ds)
    write_metrics_csv(metrics, tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == METRIC_COLUMNS
    for row, rec in zip(rows[1:], metrics.epochs):
        assert [float(v) for v in row[1:]] == [rec[c] for c in METRIC_COLUMNS[1:]]


# --- loss landscape probe ------------------------------------------------------------

def _half_square(theta):
    return lambda: grad.scale(grad.total(grad.mul(theta, theta)), 0.5)


def test_probe_zero_gradient():
    theta = Tensor(np.zeros(3))
    point = probe_point([theta], _half_square(theta), 1e-3)
    assert point.loss == point.perturbed_loss == 0.0


@pytest.mark.parametrize("multiplier", [4.0, 1.0, 0.0])
def test_probe_quadratic_closed_form(multiplier):
    theta = Tensor(np.array([1.3]))
    lr = 1e-3
    point = probe_point([theta], _half_square(theta), lr, multiplier)
    assert point.loss == pytest.approx(0.5 * 1.3 ** 2, rel=1e-15)
    assert point.perturbed_loss == pytest.approx(0.5 * (1.3 - multiplier * lr * 1.3) ** 2,
                                                 rel=1e-14)
    assert theta.data[0] == 1.3


def test_probe_reports_non_finite_points():
    theta = Tensor(np.array([1e200]))
    point = probe_point([theta], _half_square(theta), 1e-3)
    assert not point.finite
    assert theta.data[0] == 1e200


def test_probe_landscape_restores_parameters():
    ds = two_mesh_dataset(seed=17)
    params = tiny_params(ds)
    before = params.snapshot()
    points = probe_loss_landscape(params, ds, steps=3)
    assert len(points) == 3 and all(p.finite for p in points)
    for got, want in zip(params.snapshot(), before):
        np.testing.assert_array_equal(got, want)
    sup = probe_loss_landscape(params, ds, steps=2, mode="supervised", multiplier=0.0)
    assert all(p.loss == p.perturbed_loss for p in sup)
    with pytest.raises(ConfigError):
        probe_loss_landscape(params, ds, steps=1, mode="bogus")
