import itertools

import numpy as np
import pytest

from vesselbench.core import GrayImage, LabelGrid, evaluate_mask
from vesselbench.layersep import VesselnessMap, pseudo_label_for_sequence
from vesselbench.pipeline import DatasetBundle, SampleRecord
from vesselbench.rng import Stream
from vesselbench.segmodel import TrainHyper, init_model, predict_binary
from vesselbench.spl import (
    PaceParams,
    SplConfig,
    TrainingRun,
    apply_refinement,
    arspl_run,
    init_latent_weights,
    load_train_state,
    pace_params,
    save_train_state,
    spld_assign,
    update_self_paced_labels,
)
from vesselbench.suggest import AlreadyLabeled, AnnotationSet, OracleAnnotator
from vesselbench.superpixel import slic
from vesselbench.synth import SynthConfig, generate_sequence


class TestInitLatentWeights:
    def test_midpoint_zero(self):
        lw = init_latent_weights(VesselnessMap(np.array([[0.5]])))
        assert lw.v[0, 0] == 0.0
        assert not lw.annotated_mask.any()

    def test_endpoint_clamps_to_one(self):
        lw = init_latent_weights(VesselnessMap(np.array([[1.0, 0.0]])))
        np.testing.assert_array_equal(lw.v, [[1.0, 1.0]])

    def test_hand_value(self):
        lw = init_latent_weights(VesselnessMap(np.array([[0.6]])))
        assert lw.v[0, 0] == pytest.approx(0.4, abs=1e-12)

    def test_range(self):
        s = Stream(1, "latent-range")
        lw = init_latent_weights(VesselnessMap(s.uniform((9, 9))))
        assert lw.v.min() >= 0.0 and lw.v.max() <= 1.0


class TestPaceParams:
    def test_iteration_one_defaults(self):
        pace = pace_params(1, SplConfig())
        assert pace.tau == pytest.approx(-np.log(0.74), abs=1e-9)
        assert pace.gamma == pytest.approx(-np.log(0.19), abs=1e-9)
        assert pace.tau == pytest.approx(0.3011, abs=1e-4)
        assert pace.gamma == pytest.approx(1.6607, abs=1e-4)

    def test_iteration_thirteen(self):
        pace = pace_params(13, SplConfig())
        assert pace.tau == pytest.approx(-np.log(0.62), abs=1e-9)
        assert pace.gamma == pytest.approx(-np.log(0.07), abs=1e-9)
        assert pace.tau == pytest.approx(0.4780, abs=1e-4)
        assert pace.gamma == pytest.approx(2.6593, abs=1e-4)

    def test_clamp_saturates(self):
        cfg = SplConfig()
        late = int(np.ceil(cfg.gamma0 / cfg.mu)) + 5
        pace_late = pace_params(late, cfg)
        pace_later = pace_params(late + 7, cfg)
        assert pace_late.gamma == pytest.approx(-np.log(cfg.pace_eps))
        assert pace_late.gamma == pace_later.gamma


def spld_objective(v, losses, tau, gamma):
    return float((v * losses).sum() - tau * v.sum() - gamma * np.sqrt((v ** 2).sum()))


def brute_force_min(losses, tau, gamma):
    best = np.inf
    for bits in itertools.product((0.0, 1.0), repeat=len(losses)):
        best = min(best, spld_objective(np.array(bits), losses, tau, gamma))
    return best


class TestSpldAssign:
    def test_worked_example(self):
        pace = PaceParams(tau=0.3011, gamma=1.6607)
        weights = spld_assign(np.array([0.1, 0.5, 2.0]), pace)
        np.testing.assert_array_equal(weights, [1.0, 1.0, 0.0])

    def test_zero_losses_all_selected(self):
        pace = PaceParams(tau=0.3, gamma=1.6)
        np.testing.assert_array_equal(spld_assign(np.zeros(5), pace), np.ones(5))

    def test_all_hard_none_selected(self):
        pace = PaceParams(tau=0.3, gamma=0.7)
        losses = np.full(4, pace.tau + pace.gamma + 0.1)
        np.testing.assert_array_equal(spld_assign(losses, pace), np.zeros(4))

    def test_matches_brute_force(self):
        s = Stream(7, "spld-brute")
        for trial in range(30):
            n = 2 + int(s.uniform() * 9)
            losses = np.abs(s.normal(n))
            tau = 0.05 + 2.0 * s.uniform()
            gamma = 0.05 + 2.0 * s.uniform()
            weights = spld_assign(losses, PaceParams(tau, gamma))
            ours = spld_objective(weights, losses, tau, gamma)
            best = brute_force_min(losses, tau, gamma)
            assert ours <= best + 1e-9

    def test_tau_monotonicity(self):
        s = Stream(8, "spld-monotone")
        for trial in range(20):
            losses = np.abs(s.normal(12))
            gamma = 0.5
            lo = spld_assign(losses, PaceParams(0.4, gamma))
            hi = spld_assign(losses, PaceParams(0.9, gamma))
            assert (hi >= lo).all()  # raising tau never drops a selected pixel

    def test_equal_loss_permutation_keeps_selected_multiset(self):
        losses = np.array([0.3, 0.1, 0.3, 0.7, 0.3])
        pace = PaceParams(0.35, 0.2)
        base = spld_assign(losses, pace)
        perm = np.array([2, 0, 4, 3, 1])  # swaps the equal 0.3 entries around
        permuted = spld_assign(losses[perm], pace)
        assert sorted(losses[base == 1.0]) == sorted(losses[perm][permuted == 1.0])


class TestLabelUpdate:
    def setup_method(self):
        s = Stream(3, "label-update")
        self.image = GrayImage(s.uniform((16, 16)))
        self.model = init_model(seed=5, channel_widths=(4, 8, 16))

    def test_no_annotations_equals_predict_binary(self):
        updated = update_self_paced_labels(self.model, self.image)
        np.testing.assert_array_equal(updated.labels, predict_binary(self.model, self.image).labels)

    def test_annotation_overrides_model(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[4, 4] = True
        forced = np.zeros((16, 16), dtype=np.uint8)
        pred = predict_binary(self.model, self.image).labels.copy()
        pred[4, 4] = 1  # suppose the model says vessel
        updated = update_self_paced_labels(self.model, self.image, mask, forced)
        assert updated.labels[4, 4] == 0

    def test_idempotent(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[2, 3] = True
        forced = np.ones((16, 16), dtype=np.uint8)
        once = update_self_paced_labels(self.model, self.image, mask, forced)
        twice = LabelGrid(np.where(mask, forced, once.labels).astype(np.uint8))
        np.testing.assert_array_equal(once.labels, twice.labels)


def make_sample(seed, with_partition=True, size=32, frames=8):
    cfg = SynthConfig(seed=seed, width=size, height=size, n_frames=frames)
    seq, truth = generate_sequence(cfg)
    vmap, otsu, _ = pseudo_label_for_sequence(seq)
    partition = slic(seq.key_frame, 16) if with_partition else None
    return SampleRecord(
        image_id=f"seq_{seed}",
        image=seq.key_frame,
        pseudo=otsu.labels,
        vesselness=vmap,
        truth=truth,
        partition=partition,
    )


@pytest.fixture(scope="module")
def mini_bundle():
    return DatasetBundle(
        train=[make_sample(101), make_sample(102)],
        val=[make_sample(201, with_partition=False)],
        test=[make_sample(301, with_partition=False)],
    )


def mini_config(**overrides) -> SplConfig:
    base = dict(
        hyper=TrainHyper(max_steps=25, batch=2, precision="f32"),
        baseline_steps=25,
        channel_widths=(4, 8, 16),
        mcdo_passes=4,
        n_b=1,
        max_alt_iters=3,
        inference_precision="f32",
    )
    base.update(overrides)
    return SplConfig(**base)


class TestApplyRefinement:
    def test_counts_and_monotonicity(self, mini_bundle):
        cfg = mini_config()
        run = TrainingRun(mini_bundle, cfg, OracleAnnotator({r.image_id: r.truth for r in mini_bundle.train}), seed=9)
        state = run.state
        image_id = mini_bundle.train[0].image_id
        img = state.images[image_id]
        sp_id = 3
        size = len(img.partition.members(sp_id))
        annotation = AnnotationSet(image_id, 1, ((sp_id, np.zeros(size, dtype=np.uint8)),))
        apply_refinement(state, image_id, annotation)
        assert (img.weights == cfg.omega).sum() == size
        assert img.store.superpixel_ids == {sp_id}
        with pytest.raises(AlreadyLabeled):
            apply_refinement(state, image_id, annotation)

    def test_empty_annotation_is_identity(self, mini_bundle):
        run = TrainingRun(mini_bundle, mini_config(), OracleAnnotator({}), seed=9)
        state = run.state
        image_id = mini_bundle.train[0].image_id
        before = state.images[image_id].weights.copy()
        apply_refinement(state, image_id, AnnotationSet(image_id, 1, ()))
        np.testing.assert_array_equal(state.images[image_id].weights, before)


class TestRunModes:
    def oracle(self, bundle):
        return OracleAnnotator({r.image_id: r.truth for r in bundle.train})

    def test_pl_mode_is_pseudo_passthrough(self, mini_bundle):
        outcome = arspl_run(mini_bundle, mini_config(mode="pl"), None, seed=1)
        expected = [evaluate_mask(r.pseudo, r.truth) for r in mini_bundle.test]
        assert outcome.report.test_metrics["dice"] == pytest.approx(np.mean([r.dice for r in expected]))
        assert outcome.report.iterations == 0
        assert outcome.model is None

    def test_zero_budget_equals_noar(self, mini_bundle):
        a = arspl_run(mini_bundle, mini_config(mode="arspl", n_b=0), None, seed=4)
        b = arspl_run(mini_bundle, mini_config(mode="noar"), None, seed=4)
        assert a.report.dice_history == b.report.dice_history
        assert a.report.test_metrics == b.report.test_metrics
        for key in a.model.params:
            np.testing.assert_array_equal(a.model.params[key], b.model.params[key])

    def test_arspl_annotation_invariants(self, mini_bundle):
        cfg = mini_config(stop_dice_increment=1e-12)
        run = TrainingRun(mini_bundle, cfg, self.oracle(mini_bundle), seed=6)
        sizes = []
        for _ in range(3):
            run.state.stopped = None
            run.step()
            sizes.append({i: len(st.store.superpixel_ids) for i, st in run.state.images.items()})
            for st in run.state.images.values():
                if st.annotated_mask.any():
                    np.testing.assert_array_equal(
                        st.labels.labels[st.annotated_mask], st.annotated_labels[st.annotated_mask]
                    )
                    assert (st.weights[st.annotated_mask] == cfg.omega).all()
        for img_id in sizes[0]:
            counts = [s[img_id] for s in sizes]
            assert counts == sorted(counts)  # Q* grows monotonically
            assert counts[-1] == 3  # one superpixel per iteration at n_b=1

    def test_oracle_refined_pixels_match_truth(self, mini_bundle):
        run = TrainingRun(mini_bundle, mini_config(), self.oracle(mini_bundle), seed=2)
        run.step()
        for rec in mini_bundle.train:
            st = run.state.images[rec.image_id]
            if st.annotated_mask.any():
                rep = evaluate_mask(
                    LabelGrid(np.where(st.annotated_mask, st.labels.labels, 0).astype(np.uint8)),
                    LabelGrid(np.where(st.annotated_mask, rec.truth.labels, 0).astype(np.uint8)),
                )
                if rep.tp + rep.fn + rep.fp > 0:
                    assert rep.dice == 1.0

    @pytest.mark.parametrize("mode", ["ns", "fs"])
    def test_baselines_single_run(self, mini_bundle, mode):
        outcome = arspl_run(mini_bundle, mini_config(mode=mode), None, seed=3)
        assert outcome.report.iterations == 1
        assert len(outcome.report.dice_history) == 1
        assert outcome.report.annotated_superpixels == 0
        assert outcome.report.annotated_pixel_fraction == 0.0

    def test_resume_identical_trajectory(self, mini_bundle, tmp_path):
        cfg = mini_config(stop_dice_increment=1e-12)
        straight = TrainingRun(mini_bundle, cfg, self.oracle(mini_bundle), seed=8)
        for _ in range(2):
            straight.state.stopped = None
            straight.step()

        part_a = TrainingRun(mini_bundle, cfg, self.oracle(mini_bundle), seed=8, checkpoint_dir=tmp_path)
        part_a.state.stopped = None
        part_a.step()
        save_train_state(part_a.state, tmp_path)
        part_b = TrainingRun(mini_bundle, cfg, self.oracle(mini_bundle), seed=8, checkpoint_dir=tmp_path)
        assert part_b.state.iteration == 1
        part_b.state.stopped = None
        part_b.step()

        assert straight.state.dice_history == part_b.state.dice_history
        for key in straight.state.model.params:
            np.testing.assert_array_equal(straight.state.model.params[key], part_b.state.model.params[key])
        for i in straight.state.images:
            np.testing.assert_array_equal(
                straight.state.images[i].labels.labels, part_b.state.images[i].labels.labels
            )
            np.testing.assert_array_equal(straight.state.images[i].weights, part_b.state.images[i].weights)
