import numpy as np
import pytest

from smrc.core import (
    GateMode,
    Model,
    ModelConfig,
    ReadoutParams,
    derive_rng,
    gate_mask,
    init_gates,
    init_reservoir,
)
from smrc.tasks import TaskSample, total_loss_terms
from smrc.training import (
    AdamState,
    CacheMismatchError,
    ReadoutMode,
    SnapshotSelection,
    TrainConfig,
    adam_update,
    bptt_gradients,
    fit_readout,
    forward_with_cache,
    restart_seed_for,
    train_once,
    train_restarts,
    _pack_full,
    _pack_gates,
    _pack_grads,
    _unpack_full,
    _unpack_gates,
)

ALL_MODES = list(GateMode)


def svd_lstsq_oracle(a, y):
    """Independent minimum-norm least squares via an explicit SVD pinv."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0)
    inv = np.array([1 / x if x > cutoff else 0.0 for x in s])
    coef = vt.T @ (inv[:, None] * (u.T @ y))
    return coef


def random_instance(n_res, t_len, mode, seed, n_seq=2, washout=3):
    cfg = ModelConfig(
        n_res=n_res, rho_in=0.5, rho_hat_res=0.9, xi=0.1, gate_mode=mode, seed=seed
    )
    res = init_reservoir(cfg, derive_rng(seed, "res"))
    gates = init_gates(cfg, derive_rng(seed, "gates"))
    rng = derive_rng(seed, "data")
    samples = [
        TaskSample(
            inputs=rng.normal(size=(t_len, 1)),
            targets=rng.normal(size=(t_len, 1)),
            washout=washout,
        )
        for _ in range(n_seq)
    ]
    readout = ReadoutParams(
        w_out=rng.uniform(-0.5, 0.5, (1, n_res)), b_out=rng.uniform(-0.5, 0.5, 1)
    )
    return Model(config=cfg, reservoir=res, gates=gates, readout=readout), samples


def trainable_mask(mode, n, full_bptt, n_out=1):
    size = 2 * n + 2 + (n_out * n + n_out if full_bptt else 0)
    mask = np.zeros(size, dtype=bool)
    if mode != GateMode.CONVENTIONAL:
        in_dyn, res_dyn = gate_mask(mode)
        if in_dyn:
            mask[:n] = True
        mask[n] = True
        if res_dyn:
            mask[n + 1 : 2 * n + 1] = True
        mask[2 * n + 1] = True
    if full_bptt:
        mask[2 * n + 2 :] = True
    return mask


def fd_gradient(model, samples, theta0, index, full_bptt, h=1e-6):
    n = model.config.n_res

    def loss_at(theta):
        if full_bptt:
            gates, readout = _unpack_full(theta, n, model.config.n_out)
        else:
            gates, readout = _unpack_gates(theta, n), model.readout
        probe = Model(
            config=model.config,
            reservoir=model.reservoir,
            gates=gates,
            readout=readout,
        )
        return forward_with_cache(probe, samples)[1]

    tp = theta0.copy()
    tp[index] += h
    tm = theta0.copy()
    tm[index] -= h
    return (loss_at(tp) - loss_at(tm)) / (2 * h)


class TestFitReadout:
    def test_hand_solved_exact_system(self):
        readout = fit_readout(np.array([[1.0], [2.0]]), np.array([[2.0], [4.0]]))
        assert readout.w_out[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert readout.b_out[0] == pytest.approx(0.0, abs=1e-12)

    def test_realizable_target_zero_residual(self):
        rng = np.random.default_rng(0)
        states = rng.normal(size=(50, 8))
        w_true = rng.normal(size=(8, 2))
        b_true = rng.normal(size=2)
        targets = states @ w_true + b_true
        readout = fit_readout(states, targets)
        resid = states @ readout.w_out.T + readout.b_out - targets
        assert np.linalg.norm(resid) <= 1e-10 * np.linalg.norm(targets)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_svd_oracle(self, seed):
        rng = np.random.default_rng(seed)
        states = rng.normal(size=(40, 6))
        targets = rng.normal(size=(40, 1))
        readout = fit_readout(states, targets)
        a = np.hstack([states, np.ones((40, 1))])
        coef = svd_lstsq_oracle(a, targets)
        rss_mine = np.sum((states @ readout.w_out.T + readout.b_out - targets) ** 2)
        rss_oracle = np.sum((a @ coef - targets) ** 2)
        assert rss_mine == pytest.approx(rss_oracle, rel=1e-10)

    def test_rank_deficient_minimum_norm(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(10, 2))
        states = np.hstack([base, base[:, :1]])  # duplicated column
        targets = rng.normal(size=(10, 1))
        readout = fit_readout(states, targets)
        a = np.hstack([states, np.ones((10, 1))])
        coef = svd_lstsq_oracle(a, targets)
        rss_mine = np.sum((states @ readout.w_out.T + readout.b_out - targets) ** 2)
        rss_oracle = np.sum((a @ coef - targets) ** 2)
        assert rss_mine == pytest.approx(rss_oracle, rel=1e-8)
        mine = np.concatenate([readout.w_out.ravel(), readout.b_out])
        assert np.linalg.norm(mine) <= np.linalg.norm(coef) * (1 + 1e-8)

    def test_monotone_ridge(self):
        rng = np.random.default_rng(2)
        states = rng.normal(size=(60, 10))
        targets = rng.normal(size=(60, 1))
        rss = []
        for lam in (0.0, 1e-6, 1e-2):
            readout = fit_readout(states, targets, ridge_lambda=lam)
            rss.append(
                np.sum((states @ readout.w_out.T + readout.b_out - targets) ** 2)
            )
        # allow solver round-off: lambda=0 and lambda=1e-6 agree to ~1e-15
        assert rss[0] <= rss[1] * (1 + 1e-12)
        assert rss[1] <= rss[2] * (1 + 1e-12)

    def test_ridge_shrinks_weights(self):
        rng = np.random.default_rng(3)
        states = rng.normal(size=(60, 10))
        targets = rng.normal(size=(60, 1))
        free = fit_readout(states, targets, ridge_lambda=0.0)
        shrunk = fit_readout(states, targets, ridge_lambda=10.0)
        assert np.linalg.norm(shrunk.w_out) < np.linalg.norm(free.w_out)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_readout(np.zeros((0, 3)), np.zeros((0, 1)))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            fit_readout(np.full((4, 2), np.nan), np.zeros((4, 1)))

    def test_readout_optimality_spot_check(self):
        # perturbing the fitted readout never decreases the training loss
        rng = np.random.default_rng(4)
        states = np.tanh(rng.normal(size=(200, 12)))
        targets = rng.normal(size=(200, 1))
        readout = fit_readout(states, targets)
        base = np.sum((states @ readout.w_out.T + readout.b_out - targets) ** 2)
        packed = np.concatenate([readout.w_out.ravel(), readout.b_out])
        for _ in range(100):
            d = rng.normal(size=packed.size)
            d *= 1e-3 / np.linalg.norm(d)
            pert = packed + d
            w = pert[:12][None, :]
            b = pert[12:]
            loss = np.sum((states @ w.T + b - targets) ** 2)
            assert loss >= base - 1e-12


class TestForwardWithCache:
    def test_loss_zero_when_readout_reproduces_targets(self):
        model, samples = random_instance(10, 30, GateMode.DYNAMIC_BOTH, seed=3)
        trajs, _, _ = forward_with_cache(model, samples)
        # replace targets by the model's own outputs: loss must vanish
        mimic = [
            TaskSample(inputs=s.inputs, targets=t.outputs, washout=s.washout)
            for s, t in zip(samples, trajs)
        ]
        _, loss, _ = forward_with_cache(model, mimic)
        assert loss == pytest.approx(0.0, abs=1e-18)

    def test_washout_window(self):
        model, samples = random_instance(8, 20, GateMode.DYNAMIC_BOTH, seed=4, n_seq=1)
        s = samples[0]
        tail_only = TaskSample(inputs=s.inputs, targets=s.targets, washout=len(s) - 1)
        trajs, loss, _ = forward_with_cache(model, [tail_only])
        final_err = trajs[0].outputs[-1] - s.targets[-1]
        assert loss == pytest.approx(float(np.sum(final_err**2)), rel=1e-12)

    def test_loss_equals_mse_times_terms(self):
        from smrc.analysis import mse_report

        model, samples = random_instance(10, 40, GateMode.DYNAMIC_BOTH, seed=5, n_seq=3)
        trajs, loss, _ = forward_with_cache(model, samples)
        mse = mse_report(
            [t.outputs for t in trajs],
            [s.targets for s in samples],
            washout=samples[0].washout,
        )
        assert loss == pytest.approx(mse * total_loss_terms(samples), rel=1e-12)

    def test_matches_sequential_run(self):
        from smrc.core import run

        model, samples = random_instance(12, 25, GateMode.DYNAMIC_BOTH, seed=6)
        trajs, _, _ = forward_with_cache(model, samples)
        for s, t in zip(samples, trajs):
            ref = run(
                model.reservoir,
                model.gates,
                model.readout,
                s.inputs,
                model.config.gate_mode,
                washout=s.washout,
            )
            assert np.allclose(t.states, ref.states, atol=1e-13)
            assert np.allclose(t.gates_in, ref.gates_in, atol=1e-13)
            assert np.allclose(t.gates_res, ref.gates_res, atol=1e-13)
            assert np.allclose(t.outputs, ref.outputs, atol=1e-13)

    def test_mixed_lengths(self):
        cfg = ModelConfig(n_res=6, gate_mode=GateMode.DYNAMIC_BOTH, seed=7)
        res = init_reservoir(cfg, derive_rng(7, "r"))
        gates = init_gates(cfg, derive_rng(7, "g"))
        readout = ReadoutParams.zeros(1, 6)
        model = Model(config=cfg, reservoir=res, gates=gates, readout=readout)
        rng = derive_rng(7, "d")
        samples = [
            TaskSample(inputs=rng.normal(size=(t, 1)), targets=rng.normal(size=(t, 1)), washout=2)
            for t in (10, 15, 10)
        ]
        trajs, loss, cache = forward_with_cache(model, samples)
        assert [len(t) for t in trajs] == [10, 15, 10]
        assert len(cache.groups) == 2


class TestBpttGradients:
    @pytest.mark.parametrize("mode", ALL_MODES)
    @pytest.mark.parametrize("full_bptt", [False, True])
    def test_matches_finite_differences(self, mode, full_bptt):
        model, samples = random_instance(6, 20, mode, seed=11)
        _, _, cache = forward_with_cache(model, samples)
        bundle = bptt_gradients(model, samples, cache, full_bptt=full_bptt)
        analytic = _pack_grads(bundle, full_bptt)
        theta0 = (
            _pack_full(model.gates, model.readout)
            if full_bptt
            else _pack_gates(model.gates)
        )
        mask = trainable_mask(mode, 6, full_bptt)
        for i in range(theta0.size):
            if not mask[i]:
                assert analytic[i] == 0.0
                continue
            fd = fd_gradient(model, samples, theta0, i, full_bptt)
            assert abs(analytic[i] - fd) <= max(1e-5 * abs(fd), 1e-10)

    def test_zero_loss_zero_gradients(self):
        model, samples = random_instance(8, 25, GateMode.DYNAMIC_BOTH, seed=12)
        trajs, _, _ = forward_with_cache(model, samples)
        mimic = [
            TaskSample(inputs=s.inputs, targets=t.outputs, washout=s.washout)
            for s, t in zip(samples, trajs)
        ]
        _, _, cache = forward_with_cache(model, mimic)
        bundle = bptt_gradients(model, mimic, cache)
        assert not _pack_grads(bundle, False).any()

    def test_static_both_masking(self):
        model, samples = random_instance(8, 25, GateMode.STATIC_BOTH, seed=13)
        _, _, cache = forward_with_cache(model, samples)
        bundle = bptt_gradients(model, samples, cache)
        assert not bundle.d_w_fb_in.any()
        assert not bundle.d_w_fb_res.any()
        assert bundle.d_b_fb_in != 0.0
        assert bundle.d_b_fb_res != 0.0

    def test_cache_mismatch_detected(self):
        model, samples = random_instance(6, 15, GateMode.DYNAMIC_BOTH, seed=14)
        _, _, cache = forward_with_cache(model, samples)
        other, _ = random_instance(6, 15, GateMode.DYNAMIC_BOTH, seed=15)
        with pytest.raises(CacheMismatchError):
            bptt_gradients(other, samples, cache)


class TestAdam:
    def test_first_step_magnitude(self):
        for g in (3.0, -0.25, 1e4):
            params = np.array([1.0])
            grads = np.array([g])
            state = AdamState.zeros(1)
            new, state = adam_update(params, grads, state, lr=1e-3)
            assert new[0] - 1.0 == pytest.approx(-1e-3 * np.sign(g), abs=1e-6 * 1e-3 + 1e-12)

    def test_zero_gradient_stream_freezes_params(self):
        params = np.array([0.5, -2.0])
        state = AdamState.zeros(2)
        for _ in range(10):
            params, state = adam_update(params, np.zeros(2), state, lr=0.1)
        assert np.array_equal(params, np.array([0.5, -2.0]))

    def test_masked_entries_stay_zero(self):
        params = np.array([0.0, 1.0])
        state = AdamState.zeros(2)
        for k in range(20):
            grads = np.array([0.0, np.sin(k + 1.0)])
            params, state = adam_update(params, grads, state, lr=0.01)
        assert params[0] == 0.0
        assert params[1] != 1.0

    def test_purity(self):
        params = np.array([1.0, 2.0])
        grads = np.array([0.3, -0.7])
        state = AdamState(m=np.array([0.1, 0.0]), v=np.array([0.2, 0.1]), t=3)
        a1, s1 = adam_update(params, grads, state, lr=0.01)
        a2, s2 = adam_update(params, grads, state, lr=0.01)
        assert np.array_equal(a1, a2)
        assert np.array_equal(s1.m, s2.m) and s1.t == s2.t == 4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_update(np.zeros(3), np.zeros(2), AdamState.zeros(3), lr=0.1)


def tiny_task(seed=0, n_seq=4, t_len=40, washout=5):
    rng = derive_rng(seed, "task")
    samples = []
    for _ in range(n_seq):
        u = rng.normal(size=(t_len, 1))
        y = np.tanh(np.cumsum(u, axis=0) * 0.1)
        samples.append(TaskSample(inputs=u, targets=y, washout=washout))
    return samples


class TestTrainOnce:
    def test_conventional_is_single_fit(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=12, gate_mode=GateMode.CONVENTIONAL, seed=1)
        result = train_once(cfg, samples, TrainConfig(epochs=500, n_restarts=1), 99)
        assert len(result.curve) == 1
        # oracle: direct least squares on the same state matrix
        res = init_reservoir(cfg, derive_rng(99, "unused"))  # different stream
        model = result.model
        _, _, cache = forward_with_cache(model, samples)
        states = np.concatenate(
            [g.states[1 + g.washout :].reshape(-1, 12) for g in cache.groups]
        )
        targets = np.concatenate(
            [g.targets[g.washout :].reshape(-1, 1) for g in cache.groups]
        )
        oracle = svd_lstsq_oracle(np.hstack([states, np.ones((len(states), 1))]), targets)
        rss_mine = np.sum((states @ model.readout.w_out.T + model.readout.b_out - targets) ** 2)
        rss_oracle = np.sum((np.hstack([states, np.ones((len(states), 1))]) @ oracle - targets) ** 2)
        assert rss_mine == pytest.approx(rss_oracle, rel=1e-8)

    def test_loss_decreases(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=12, gate_mode=GateMode.DYNAMIC_BOTH, seed=2)
        result = train_once(cfg, samples, TrainConfig(epochs=120, n_restarts=1), 7)
        assert result.curve[-1] <= result.curve[0]
        assert result.train_mse == pytest.approx(result.curve.min())

    def test_best_snapshot_selection(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=10, gate_mode=GateMode.DYNAMIC_BOTH, seed=3)
        result = train_once(cfg, samples, TrainConfig(epochs=60, n_restarts=1), 8)
        assert result.train_mse == result.curve[result.selected_epoch]
        assert result.train_mse == result.curve.min()

    def test_final_epoch_selection(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=10, gate_mode=GateMode.DYNAMIC_BOTH, seed=3)
        tc = TrainConfig(
            epochs=60, n_restarts=1, snapshot_selection=SnapshotSelection.FINAL_EPOCH
        )
        result = train_once(cfg, samples, tc, 8)
        assert result.selected_epoch == 59
        assert result.train_mse == result.curve[-1]

    def test_masking_absorbing(self):
        samples = tiny_task()
        for mode in (GateMode.STATIC_INPUT_GATE, GateMode.STATIC_BOTH):
            cfg = ModelConfig(n_res=10, gate_mode=mode, seed=4)
            result = train_once(cfg, samples, TrainConfig(epochs=80, n_restarts=1), 9)
            if mode != GateMode.DYNAMIC_BOTH:
                in_dyn, res_dyn = gate_mask(mode)
                if not in_dyn:
                    assert not result.model.gates.w_fb_in.any()
                if not res_dyn:
                    assert not result.model.gates.w_fb_res.any()

    def test_snapshot_readout_consistent(self):
        # the returned model must reproduce exactly the selected train MSE
        samples = tiny_task()
        cfg = ModelConfig(n_res=10, gate_mode=GateMode.DYNAMIC_BOTH, seed=5)
        result = train_once(cfg, samples, TrainConfig(epochs=50, n_restarts=1), 10)
        _, loss, _ = forward_with_cache(result.model, samples)
        assert loss / total_loss_terms(samples) == pytest.approx(
            result.train_mse, rel=1e-12
        )

    def test_full_bptt_trains(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=10, gate_mode=GateMode.DYNAMIC_BOTH, seed=6)
        tc = TrainConfig(
            epochs=150, n_restarts=1, readout_mode=ReadoutMode.FULL_BPTT
        )
        result = train_once(cfg, samples, tc, 11)
        assert result.curve[-1] < result.curve[0]

    def test_pseudo_inverse_beats_full_bptt_early(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=10, gate_mode=GateMode.DYNAMIC_BOTH, seed=6)
        pi = train_once(cfg, samples, TrainConfig(epochs=30, n_restarts=1), 12)
        fb = train_once(
            cfg,
            samples,
            TrainConfig(epochs=30, n_restarts=1, readout_mode=ReadoutMode.FULL_BPTT),
            12,
        )
        assert pi.train_mse < fb.train_mse

    def test_empty_dataset_rejected(self):
        cfg = ModelConfig(n_res=5, seed=1)
        with pytest.raises(ValueError):
            train_once(cfg, [], TrainConfig(epochs=1, n_restarts=1), 1)


class TestTrainRestarts:
    def test_single_restart_equals_train_once(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=8, gate_mode=GateMode.DYNAMIC_BOTH, seed=21)
        tc = TrainConfig(epochs=20, n_restarts=1)
        direct = train_once(cfg, samples, tc, restart_seed_for(cfg, 0))
        viarestarts = train_restarts(cfg, samples, tc)
        assert viarestarts.best_index == 0
        assert np.array_equal(direct.curve, viarestarts.best.curve)
        assert np.array_equal(
            direct.model.gates.w_fb_in, viarestarts.best.model.gates.w_fb_in
        )

    def test_best_selection_contract(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=8, gate_mode=GateMode.DYNAMIC_BOTH, seed=22)
        tc = TrainConfig(epochs=20, n_restarts=4)
        out = train_restarts(cfg, samples, tc)
        mses = [r.train_mse for r in out.results]
        assert out.best.train_mse == min(mses)
        assert len(out.curves) == 4

    def test_serial_parallel_identical(self):
        samples = tiny_task()
        cfg = ModelConfig(n_res=8, gate_mode=GateMode.DYNAMIC_BOTH, seed=23)
        tc = TrainConfig(epochs=15, n_restarts=3)
        serial = train_restarts(cfg, samples, tc, workers=1)
        parallel = train_restarts(cfg, samples, tc, workers=2)
        assert serial.best_index == parallel.best_index
        for a, b in zip(serial.results, parallel.results):
            assert np.array_equal(a.curve, b.curve)
        assert np.array_equal(
            serial.best.model.readout.w_out, parallel.best.model.readout.w_out
        )
        assert np.array_equal(
            serial.best.model.gates.w_fb_res, parallel.best.model.gates.w_fb_res
        )
