"""Unit tests for schedules, the overfitting monitor, hand-off and whole runs."""

from dataclasses import replace

import numpy as np
import pytest

import itl_sim.federation as federation
from itl_sim.checkpoint import encode_checkpoint, load_checkpoint
from itl_sim.errors import ConfigurationError, DataError, NumericalError
from itl_sim.federation import (
    CWT,
    SWT,
    MonitorAction,
    OverfitMonitor,
    TrainingPolicy,
    evaluate,
    handoff,
    initial_checkpoint,
    lr_grid_search,
    monitor_epoch,
    resume_run,
    run_cwt,
    run_schedule,
    run_swt,
    train_visit,
    validation_loss,
    visit_plan,
)
from itl_sim.optimizers import new_optimizer
from itl_sim.tensor_nn import head_param_names, init_params, params_equal


def walk(monitor, losses, optimizer):
    actions = []
    for loss in losses:
        monitor, optimizer, action = monitor_epoch(monitor, loss, optimizer)
        actions.append(action)
    return monitor, optimizer, actions


@pytest.mark.unit
class TestVisitPlan:
    def test_swt(self):
        assert visit_plan(SWT(4), (1, 2, 3)) == [(1, 4), (2, 4), (3, 4)]

    def test_cwt_ring(self):
        plan = visit_plan(CWT(transfer_every=2, iterations=3), (1, 2))
        assert plan == [(1, 2), (2, 2)] * 3

    def test_first_visit_budget(self):
        assert visit_plan(CWT(2, 2, first_visit_epochs=7), (1, 2))[0] == (1, 7)

    def test_empty_schedule_rejected(self):
        with pytest.raises(ConfigurationError):
            visit_plan(CWT(transfer_every=0), (1, 2))


@pytest.mark.unit
class TestMonitor:
    def test_halves_after_flat_epochs(self):
        optimizer = new_optimizer("adam", {"w": np.zeros(1)}, lr=0.001)
        monitor = OverfitMonitor(e_val=5, e_stop=20).start(1.0)
        monitor, optimizer, actions = walk(monitor, [1.0] * 5, optimizer)
        assert actions == [MonitorAction.CONTINUE] * 4 + [MonitorAction.HALVE_LR]
        assert optimizer.lr == pytest.approx(0.0005)
        assert monitor.since_halving == 0
        assert monitor.since_improvement == 5

    def test_early_stop_wins_over_halving(self):
        optimizer = new_optimizer("adam", {"w": np.zeros(1)})
        monitor = OverfitMonitor(e_val=3, e_stop=6).start(1.0)
        _, optimizer, actions = walk(monitor, [1.0] * 6, optimizer)
        assert actions[2] is MonitorAction.HALVE_LR
        assert actions[5] is MonitorAction.EARLY_STOP
        assert optimizer.halving == 0.5

    def test_improvement_resets_counters(self):
        optimizer = new_optimizer("adam", {"w": np.zeros(1)})
        monitor = OverfitMonitor(e_val=3, e_stop=6).start(1.0)
        monitor, _, actions = walk(monitor, [1.0, 1.0, 0.5, 0.6, 0.6], optimizer)
        assert MonitorAction.HALVE_LR not in actions
        assert (monitor.best_epoch, monitor.best_val_loss) == (3, 0.5)
        assert monitor.since_improvement == 2

    def test_improvement_below_threshold_ignored(self):
        monitor = OverfitMonitor(min_delta=1e-3).start(1.0)
        monitor, _, _ = monitor_epoch(monitor, 0.9995, new_optimizer("sgd", {}))
        assert monitor.best_epoch == 0

    def test_non_finite_loss(self):
        with pytest.raises(NumericalError):
            monitor_epoch(OverfitMonitor().start(1.0), float("nan"), new_optimizer("sgd", {}))


@pytest.mark.unit
class TestHandoff:
    def test_rop_keeps_optimizer(self, make_run_spec, rng):
        run_spec = make_run_spec()
        ckpt = initial_checkpoint(run_spec, rng)
        context = handoff(ckpt, 1, run_spec.model, run_spec.policy)
        assert context.optimizer is ckpt.optimizer
        assert context.first_visit
        assert context.head_index is None

    def test_nop_starts_fresh(self, make_run_spec, rng):
        run_spec = make_run_spec()
        ckpt = initial_checkpoint(run_spec, rng)
        worn = replace(ckpt.optimizer, t=40, halving=0.25)
        policy = replace(run_spec.policy, reload="nop")
        context = handoff(encode_checkpoint(replace(ckpt, optimizer=worn)), 2, run_spec.model, policy)
        assert context.optimizer.t == 0
        assert context.optimizer.lr == pytest.approx(0.01)
        assert params_equal(context.params, ckpt.params)

    def test_multi_head_selects_center_head(self, make_run_spec, tiny_multi_model, rng):
        run_spec = make_run_spec(model=tiny_multi_model)
        ckpt = initial_checkpoint(run_spec, rng)
        ckpt.provenance["visited"] = [1]
        assert handoff(ckpt, 3, run_spec.model, run_spec.policy).head_index == 2
        assert not handoff(ckpt, 1, run_spec.model, run_spec.policy).first_visit

    def test_unknown_reload_policy(self):
        with pytest.raises(ConfigurationError):
            TrainingPolicy(reload="keep")


@pytest.mark.unit
class TestTrainVisit:
    def test_returns_best_validation_state(self, make_run_spec, tiny_centers, rng):
        run_spec = make_run_spec()
        context = handoff(initial_checkpoint(run_spec, rng), 1, run_spec.model, run_spec.policy)
        outcome = train_visit(run_spec.model, context, tiny_centers[0], 5, run_spec.policy, rng, finalize=False)
        assert outcome.epochs_run == 5
        assert 0 <= outcome.best_epoch <= 5
        val = validation_loss(run_spec.model, outcome.params, tiny_centers[0].val, run_spec.policy.loss)
        assert val == outcome.best_val_loss
        start = validation_loss(run_spec.model, context.params, tiny_centers[0].val, run_spec.policy.loss)
        assert outcome.best_val_loss < start

    def test_inactive_heads_untouched(self, make_run_spec, tiny_multi_model, tiny_centers, rng):
        run_spec = make_run_spec(model=tiny_multi_model)
        ckpt = initial_checkpoint(run_spec, rng)
        context = handoff(ckpt, 1, run_spec.model, run_spec.policy)
        outcome = train_visit(run_spec.model, context, tiny_centers[0], 2, run_spec.policy, rng)
        for h in (1, 2):
            for name in head_param_names(tiny_multi_model, h):
                assert np.array_equal(outcome.params[name], ckpt.params[name])
        assert not np.array_equal(outcome.params["heads.00.00.weight"], ckpt.params["heads.00.00.weight"])

    def test_artifacts_produced_at_end(self, make_run_spec, tiny_centers, rng):
        run_spec = make_run_spec(method="ewc")
        context = handoff(initial_checkpoint(run_spec, rng), 1, run_spec.model, run_spec.policy)
        outcome = train_visit(run_spec.model, context, tiny_centers[0], 2, run_spec.policy, rng)
        importance = outcome.regularizer.importance
        assert outcome.regularizer.importance_version == 1
        assert sorted(importance) == sorted(outcome.params)
        assert all((v >= 0).all() for v in importance.values())

    def test_grid_search_picks_a_candidate(self, make_run_spec, tiny_centers, rng):
        run_spec = make_run_spec()
        policy = replace(run_spec.policy, lrgs_candidates=(0.1, 0.01), lrgs_epochs=1)
        context = handoff(initial_checkpoint(run_spec, rng), 1, run_spec.model, policy)
        assert lr_grid_search(run_spec.model, context, tiny_centers[0], policy) in (0.1, 0.01)

    def test_evaluate_skips_unvisited_heads(self, tiny_multi_model, tiny_centers):
        params = init_params(tiny_multi_model, 0)
        column = evaluate(tiny_multi_model, params, tiny_centers, visited=[1, 2])
        assert np.isnan(column[2])
        assert np.isfinite(column[:2]).all()


@pytest.mark.unit
class TestRuns:
    def test_swt_matrix(self, make_run_spec, tiny_centers):
        result = run_swt(make_run_spec(epochs=3), tiny_centers)
        assert not result.failed
        assert result.matrix.values.shape == (3, 3)
        assert result.matrix.visits == (1, 2, 3)
        assert ((result.matrix.values >= 0) & (result.matrix.values <= 100)).all()

    def test_deterministic(self, make_run_spec, tiny_centers):
        a = run_schedule(make_run_spec(method="si"), tiny_centers)
        b = run_schedule(make_run_spec(method="si"), tiny_centers)
        assert a == b
        assert params_equal(a.final_params, b.final_params)

    @pytest.mark.parametrize("method", ["ft", "lwf"])
    def test_single_cwt_iteration_is_swt(self, method, make_run_spec, tiny_centers):
        swt = run_swt(make_run_spec(method=method, epochs=4), tiny_centers)
        cwt = run_cwt(make_run_spec(method=method, schedule=CWT(transfer_every=4, iterations=1)), tiny_centers)
        assert swt.matrix == cwt.matrix
        assert params_equal(swt.final_params, cwt.final_params)

    def test_schedule_type_checked(self, make_run_spec, tiny_centers):
        with pytest.raises(ConfigurationError):
            run_swt(make_run_spec(schedule=CWT(2, 2)), tiny_centers)
        with pytest.raises(ConfigurationError):
            run_cwt(make_run_spec(), tiny_centers)

    @pytest.mark.parametrize("method", ["ewc", "si", "mas"])
    def test_zero_lambda_reduces_to_fine_tuning(self, method, make_run_spec, tiny_centers):
        """25 epochs x 3 batches x 3 centers = 225 optimizer steps."""
        patient = TrainingPolicy(batch_size=12, lr=0.01, e_val=100, e_stop=100)
        ft = run_swt(replace(make_run_spec(epochs=25), policy=patient), tiny_centers)
        reg = run_swt(replace(make_run_spec(method=method, lam=0.0, epochs=25), policy=patient), tiny_centers)
        assert ft.matrix == reg.matrix
        assert params_equal(ft.final_params, reg.final_params)

    def test_multi_head_leaves_future_centers_empty(self, make_run_spec, tiny_multi_model, tiny_centers):
        result = run_swt(make_run_spec(model=tiny_multi_model), tiny_centers)
        values = result.matrix.values
        assert np.isnan(values[1, 0]) and np.isnan(values[2, 0]) and np.isnan(values[2, 1])
        assert np.isfinite(values[:, -1]).all()

    def test_head_count_must_match_centers(self, make_run_spec, tiny_multi_model, tiny_centers):
        with pytest.raises(ConfigurationError):
            run_swt(make_run_spec(model=tiny_multi_model), tiny_centers[:2])

    def test_misnumbered_centers(self, make_run_spec, tiny_centers):
        with pytest.raises(DataError):
            run_swt(make_run_spec(), tiny_centers[1:])

    def test_numerical_failure_recorded(self, make_run_spec, tiny_centers, monkeypatch):
        def explode(*args, **kwargs):
            raise NumericalError("non-finite task loss")

        monkeypatch.setattr(federation, "train_visit", explode)
        result = run_swt(make_run_spec(), tiny_centers)
        assert result.failed
        assert result.matrix is None
        assert result.error.startswith("visit 1, center 1")

    @pytest.mark.parametrize("method", ["ewc", "si", "ebll", "imm-mode"])
    def test_resume_matches_uninterrupted_run(self, method, make_run_spec, tiny_centers, tmp_path):
        """Nine visits x 6 epochs x 3 batches = 162 steps, interrupted after the fourth visit."""
        patient = TrainingPolicy(batch_size=12, lr=0.01, e_val=100, e_stop=100)
        run_spec = replace(
            make_run_spec(method=method, schedule=CWT(transfer_every=6, iterations=3)),
            policy=patient,
            checkpoint_dir=str(tmp_path),
        )
        full = run_cwt(run_spec, tiny_centers)
        assert not full.failed, full.error
        assert full.matrix.num_visits == 9
        saved = load_checkpoint(tmp_path / "tiny" / f"{method}_seed0_visit004.itlc")
        assert saved.optimizer.t > 0
        assert saved.rng_state is not None
        if method == "si":
            assert saved.regularizer.importance is not None
        if method == "ebll":
            assert saved.regularizer.encoder is not None
        resumed = resume_run(run_spec, tiny_centers, saved)
        assert resumed == full
        assert params_equal(resumed.final_params, full.final_params)
