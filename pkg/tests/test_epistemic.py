import dataclasses
import json
import math
from functools import lru_cache

import numpy as np
import pytest
import torch
from safetensors.torch import save_file

import epistemic
from errors import (
    ArchitectureMismatchError,
    CheckpointCorruptError,
    DegenerateBaselineWarning,
    DegenerateGeometryError,
    EmptyClusterError,
    ShapeMismatchError,
)
from epistemic import (
    EpistemicConfig,
    assignment_entropy,
    cluster_labels,
    cluster_purity,
    density_stats,
    encode_motions,
    ensemble_uncertainty,
    epu_score,
    estimate_k,
    fit_clusters,
    latent_scale,
    load_cluster_model,
    mc_dropout_uncertainty,
    pretrain_autoencoder,
    save_cluster_model,
    select_k,
    soft_assign,
    target_distribution,
)
from forecasters import STTransConfig, TrainConfig, forecast, train
from metrics import auroc
from pose_core import (
    REST_POSE,
    ForecastSample,
    canonical_family_specs,
    generate_family,
    shuffle_frames,
    shuffle_joints,
    stack_samples,
    window,
)

_QUICK = EpistemicConfig(latent_dim=4, hidden_dim=16, ae_epochs=3, dec_max_steps=100,
                         target_update_interval=20, finetune_epochs=1, dec_batch_size=32)


def _identity(z):
    return np.asarray(z, dtype=np.float64)


def _blobs(k: int, n: int, sigma: float, separation: float, dim: int, seed: int):
    """k Gaussian blobs whose closest pair of centers is `separation` apart."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(k, dim))
    gaps = [np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1:]]
    centers *= separation / min(gaps)
    labels = np.arange(n) % k
    return centers[labels] + rng.normal(0.0, sigma, size=(n, dim)), labels


def _motions(n_per_family=6, T=5, seed=0):
    motions, labels = [], []
    for spec in canonical_family_specs():
        seq = generate_family(spec, 120, seed=seed + spec.family_id)
        for sample in window(seq, O=2, T=T, stride=7)[:n_per_family]:
            motions.append(sample.future)
            labels.append(spec.family_id)
    return np.stack(motions), np.array(labels)


@pytest.fixture(scope="module")
def quick_model():
    motions, _ = _motions()
    ae = pretrain_autoencoder(motions, _QUICK, seed=0)
    return fit_clusters(ae, motions, 3, 1.0, _QUICK), motions


class TestAssignments:
    def test_rows_sum_to_one(self):
        gen = torch.Generator().manual_seed(0)
        q = soft_assign(torch.randn(50, 6, generator=gen, dtype=torch.float64),
                        torch.randn(4, 6, generator=gen, dtype=torch.float64))
        assert torch.all((q.sum(dim=1) - 1.0).abs() < 1e-9)
        p = target_distribution(q)
        assert torch.all((p.sum(dim=1) - 1.0).abs() < 1e-9)

    def test_uniform_row_has_max_entropy(self):
        assert abs(assignment_entropy(np.full(4, 0.25))[0] - math.log(4)) < 1e-9
        assert abs(assignment_entropy(np.full(4, 0.25))[0] - 1.386294) < 1e-6

    def test_one_hot_row_has_zero_entropy(self):
        assert assignment_entropy(np.array([0.0, 1.0, 0.0]))[0] == 0.0

    def test_target_sharpens(self):
        q = torch.tensor([[0.6, 0.4], [0.4, 0.6]], dtype=torch.float64)
        p = target_distribution(q)
        assert p[0, 0] > q[0, 0] and p[1, 1] > q[1, 1]

    def test_purity(self):
        assert cluster_purity([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0
        assert cluster_purity([0, 0, 1, 1], [0, 0, 0, 0]) == 0.5

    def test_latent_scale_spaces_neighbouring_centers(self):
        centers = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 8.0]])
        assert latent_scale(centers) == pytest.approx(2.0 / 6.0)
        assert latent_scale(centers[:1]) == 1.0
        assert latent_scale(np.zeros((3, 2))) == 1.0

    def test_far_points_are_uncertain_and_centers_are_not(self):
        centers = torch.tensor([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]], dtype=torch.float64)
        near = assignment_entropy(soft_assign(centers, centers))
        far = assignment_entropy(soft_assign(torch.tensor([[400.0, 400.0]], dtype=torch.float64), centers))
        assert near.max() < 0.7
        assert far[0] > 0.99 * math.log(3)


class TestDensityPeaks:
    def test_all_within_cutoff(self):
        stats = density_stats(np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]), d_c=10.0)
        np.testing.assert_array_equal(stats.rho, [2, 2, 2])

    def test_densest_point_gets_max_distance(self):
        z, _ = _blobs(2, 60, 0.1, 10.0, 2, seed=0)
        stats = density_stats(z)
        top = int(np.argmax(stats.rho))
        dist = np.linalg.norm(z - z[top], axis=1)
        assert stats.delta[top] == pytest.approx(dist.max())
        assert np.all(stats.gamma >= 0) and np.all(stats.gamma <= 1)

    def test_select_k_at_largest_gap(self):
        k, ratios = select_k(np.array([1.0, 0.9, 0.8, 0.05, 0.04, 0.03, 0.02]), k_max=5)
        assert k == 3
        assert ratios[2] == pytest.approx(0.8 / 0.05)

    @pytest.mark.parametrize("seed", range(10))
    def test_three_planted_blobs(self, seed):
        z, _ = _blobs(3, 300, 0.1, 10.0, 2, seed)
        k, _ = estimate_k(z, EpistemicConfig(), reducer=_identity)
        assert k == 3

    def test_single_tight_blob(self):
        z = np.random.default_rng(0).normal(0.0, 0.1, size=(300, 2))
        k, _ = estimate_k(z, EpistemicConfig(k_min=1), reducer=_identity)
        assert k == 1

    def test_default_search_never_returns_one_cluster(self):
        z = np.random.default_rng(0).normal(0.0, 0.1, size=(300, 2))
        k, _ = estimate_k(z, EpistemicConfig(), reducer=_identity)
        assert 2 <= k <= 30

    def test_select_k_respects_lower_bound(self):
        gamma = np.array([1.0, 0.01, 0.009, 0.001, 0.0009])
        assert select_k(gamma, k_max=4)[0] == 1
        assert select_k(gamma, k_max=4, k_min=2)[0] == 3
        assert select_k(gamma, k_max=1, k_min=2)[0] == 2

    def test_translation_and_scale_invariance(self):
        z, _ = _blobs(4, 200, 0.1, 10.0, 2, seed=3)
        k, _ = estimate_k(z, EpistemicConfig(), reducer=_identity)
        k_moved, _ = estimate_k(3.0 * z + 5.0, EpistemicConfig(), reducer=_identity)
        assert k == k_moved == 4

    def test_identical_points(self):
        with pytest.raises(DegenerateGeometryError):
            estimate_k(np.ones((10, 3)), EpistemicConfig(), reducer=_identity)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            estimate_k(np.eye(2), EpistemicConfig(), reducer=_identity)


class TestAutoencoder:
    def test_zero_epochs_keeps_baseline(self):
        motions, _ = _motions()
        state = pretrain_autoencoder(motions, EpistemicConfig(latent_dim=4, hidden_dim=8, ae_epochs=0), seed=0)
        assert state.final_loss == state.baseline_loss
        assert math.isfinite(state.baseline_loss)

    def test_same_seed_same_weights(self):
        motions, _ = _motions()
        a = pretrain_autoencoder(motions, _QUICK, seed=4)
        b = pretrain_autoencoder(motions, _QUICK, seed=4)
        for (name, va), (_, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert torch.equal(va, vb), name

    def test_constant_sequences_are_reconstructed(self):
        rng = np.random.default_rng(0)
        poses = REST_POSE[None] + rng.normal(0.0, 20.0, size=(50, 8, 3))
        motions = np.repeat(poses[:, None], 5, axis=1)
        cfg = EpistemicConfig(latent_dim=8, hidden_dim=32, ae_epochs=200, ae_learning_rate=5e-3)
        state = pretrain_autoencoder(motions, cfg, seed=0)
        features = epistemic.motion_features(motions)
        assert state.final_loss < 0.01 * float((features ** 2).mean())
        assert state.final_loss < state.baseline_loss

    def test_encode_shape(self, quick_model):
        model, motions = quick_model
        assert encode_motions(model.autoencoder, motions).shape == (len(motions), 4)

    def test_needs_two_sequences(self):
        motions, _ = _motions()
        with pytest.raises(ValueError):
            pretrain_autoencoder(motions[:1], _QUICK)


class TestClustering:
    def test_single_cluster_has_zero_entropy(self):
        motions, _ = _motions()
        ae = pretrain_autoencoder(motions, _QUICK, seed=0)
        model = fit_clusters(ae, motions, 1, 1.0, _QUICK)
        report = epu_score(model, motions)
        assert np.all(report.per_sample_entropy == 0.0)
        assert report.epu == 0.0
        assert np.all(report.assignment_probs == 1.0)

    def test_zero_lambda_leaves_decoder_untouched(self):
        motions, _ = _motions()
        ae = pretrain_autoencoder(motions, _QUICK, seed=0)
        before = {k: v.clone() for k, v in ae.model.state_dict().items()}
        model = fit_clusters(ae, motions, 3, 0.0, _QUICK)
        after = model.autoencoder.model.state_dict()
        for name in before:
            if name.split(".")[0] in {"from_latent", "decoder", "readout"}:
                assert torch.equal(before[name], after[name]), name
        for name, value in ae.model.state_dict().items():
            assert torch.equal(before[name], value), "pretrained autoencoder was modified"

    def test_refinement_keeps_the_initial_partition(self, quick_model):
        model, _ = quick_model
        motions, labels = _motions()
        np.testing.assert_array_equal(model.train_labels, model.init_labels)
        assert cluster_purity(labels, model.train_labels) == cluster_purity(labels, model.init_labels)

    def test_aggressive_refinement_is_rolled_back(self):
        motions, _ = _motions()
        ae = pretrain_autoencoder(motions, _QUICK, seed=0)
        cfg = dataclasses.replace(_QUICK, dec_learning_rate=0.5, finetune_epochs=3)
        model = fit_clusters(ae, motions, 3, 1.0, cfg)
        np.testing.assert_array_equal(model.train_labels, model.init_labels)

    def test_unanchored_refinement(self):
        motions, _ = _motions()
        ae = pretrain_autoencoder(motions, _QUICK, seed=0)
        model = fit_clusters(ae, motions, 3, 1.0, dataclasses.replace(_QUICK, max_label_drift=1.0))
        assert model.train_labels.shape == (len(motions),)
        assert set(model.train_labels.tolist()) <= {0, 1, 2}

    def test_fit_needs_enough_motions(self):
        motions, _ = _motions(n_per_family=1)
        ae = pretrain_autoencoder(motions, _QUICK, seed=0)
        with pytest.raises(ValueError):
            fit_clusters(ae, motions, 5, 1.0, _QUICK)

    def test_empty_cluster_after_reseeding(self, monkeypatch):
        class _Degenerate:
            def __init__(self, n_clusters, **_):
                self.n_clusters = n_clusters

            def fit(self, z):
                self.labels_ = np.zeros(len(z), dtype=np.int64)
                self.cluster_centers_ = np.zeros((self.n_clusters, z.shape[1]))
                return self

        monkeypatch.setattr(epistemic, "KMeans", _Degenerate)
        motions, _ = _motions()
        ae = pretrain_autoencoder(motions, _QUICK, seed=0)
        with pytest.raises(EmptyClusterError):
            fit_clusters(ae, motions, 2, 1.0, _QUICK)


class TestEpuScore:
    def test_bounds_and_mean(self, quick_model):
        model, motions = quick_model
        report = epu_score(model, motions)
        assert np.all(report.per_sample_entropy >= 0)
        assert np.all(report.per_sample_entropy <= math.log(model.K) + 1e-12)
        assert report.epu == pytest.approx(report.per_sample_entropy.mean())
        assert np.all(np.abs(report.assignment_probs.sum(axis=1) - 1.0) < 1e-9)

    def test_single_encoder_pass_no_forecaster(self, quick_model):
        model, motions = quick_model
        report = epu_score(model, motions)
        assert report.encoder_passes == len(motions)
        assert report.forecaster_passes == 0
        assert set(report.to_json()) == {"epu", "n", "entropies"}

    def test_scores_do_not_depend_on_batch_company(self, quick_model):
        model, motions = quick_model
        full = epu_score(model, motions).per_sample_entropy
        part = epu_score(model, motions[3:7]).per_sample_entropy
        np.testing.assert_allclose(part, full[3:7], atol=1e-6)

    def test_hard_labels_follow_assignments(self, quick_model):
        model, motions = quick_model
        labels = cluster_labels(model, motions)
        np.testing.assert_array_equal(labels, epu_score(model, motions).assignment_probs.argmax(axis=1))
        assert labels.min() >= 0 and labels.max() < model.K

    def test_shape_mismatch(self, quick_model):
        model, motions = quick_model
        with pytest.raises(ShapeMismatchError):
            epu_score(model, motions[:, :3])

    def test_archive_round_trip(self, quick_model, tmp_path):
        model, motions = quick_model
        save_cluster_model(model, tmp_path / "clusters.safetensors")
        loaded = load_cluster_model(tmp_path / "clusters.safetensors")
        assert loaded.K == model.K
        np.testing.assert_array_equal(loaded.train_labels, model.train_labels)
        np.testing.assert_array_equal(epu_score(loaded, motions).per_sample_entropy,
                                      epu_score(model, motions).per_sample_entropy)

    def test_manifest_without_autoencoder_block(self, quick_model, tmp_path):
        model, _ = quick_model
        path = tmp_path / "clusters.safetensors"
        save_cluster_model(model, path)
        manifest, tensors = epistemic.read_archive(path)
        del manifest["autoencoder"]
        save_file(tensors, str(path), metadata={"manifest": json.dumps(manifest)})
        with pytest.raises(CheckpointCorruptError):
            load_cluster_model(path)


def _family_futures(family_id: int, seed: int) -> np.ndarray:
    seq = generate_family(canonical_family_specs()[family_id], 120, seed=seed)
    return np.stack([s.future for s in window(seq, O=2, T=5, stride=5)])


@pytest.fixture(scope="module")
def walking_model():
    """Clusters fitted on walking only: five phases of the 1 Hz gait, one per cluster."""
    motions = np.concatenate([_family_futures(0, seed) for seed in (0, 1)])
    ae = pretrain_autoencoder(motions, _QUICK, seed=0)
    return fit_clusters(ae, motions, 5, 1.0, _QUICK)


class TestUnseenMotions:
    @pytest.mark.parametrize("unseen_family", [1, 2])
    def test_unseen_family_scores_higher(self, walking_model, unseen_family):
        seen = epu_score(walking_model, _family_futures(0, seed=7))
        unseen = epu_score(walking_model, _family_futures(unseen_family, seed=7))
        assert auroc(seen.per_sample_entropy, unseen.per_sample_entropy) > 0.5
        assert unseen.epu > seen.epu

    def test_shuffled_motions_score_higher(self, walking_model):
        held_out = window(generate_family(canonical_family_specs()[0], 120, seed=7), O=2, T=5, stride=5)
        normal = epu_score(walking_model, np.stack([s.future for s in held_out])).epu
        frames = epu_score(walking_model, np.stack([shuffle_frames(s, i).future for i, s in enumerate(held_out)])).epu
        joints = epu_score(walking_model, np.stack([shuffle_joints(s, i).future for i, s in enumerate(held_out)])).epu
        assert normal < frames
        assert normal < joints

    def test_training_assignments_are_not_flat(self, walking_model):
        motions = np.concatenate([_family_futures(0, seed) for seed in (0, 1)])
        report = epu_score(walking_model, motions)
        assert report.epu < 0.75 * math.log(walking_model.K)


# ---------------------------------------------------------------------------
# Sampling baselines
# ---------------------------------------------------------------------------

_SMALL_NET = dict(num_blocks=1, model_width=8, num_heads=2, mlp_hidden=16)


@pytest.fixture(scope="module")
def tiny_checkpoints():
    samples = []
    for spec in canonical_family_specs():
        samples.extend(window(generate_family(spec, 40, seed=spec.family_id), O=4, T=3, stride=3))
    with_dropout = train("st_trans", samples, TrainConfig(epochs=1, seed=0), STTransConfig(dropout_rate=0.3, **_SMALL_NET))
    no_dropout = train("st_trans", samples, TrainConfig(epochs=1, seed=0), STTransConfig(dropout_rate=0.0, **_SMALL_NET))
    observed, _ = stack_samples(samples[:6])
    return with_dropout, no_dropout, observed


class TestBaselines:
    def test_mc_dropout_counts_and_reproducibility(self, tiny_checkpoints):
        ckpt, _, observed = tiny_checkpoints
        a = mc_dropout_uncertainty(ckpt, observed, passes=5, seed=1)
        b = mc_dropout_uncertainty(ckpt, observed, passes=5, seed=1)
        assert a.forward_passes == 5
        assert a.score > 0
        np.testing.assert_array_equal(a.per_sample, b.per_sample)

    def test_mc_dropout_without_dropout(self, tiny_checkpoints):
        _, ckpt, observed = tiny_checkpoints
        with pytest.warns(DegenerateBaselineWarning):
            result = mc_dropout_uncertainty(ckpt, observed, passes=4)
        assert result.score == 0.0

    def test_mc_dropout_needs_two_passes(self, tiny_checkpoints):
        ckpt, _, observed = tiny_checkpoints
        with pytest.raises(ValueError):
            mc_dropout_uncertainty(ckpt, observed, passes=1)

    def test_identical_members(self, tiny_checkpoints):
        ckpt, _, observed = tiny_checkpoints
        result = ensemble_uncertainty([ckpt, ckpt, ckpt], observed)
        assert result.score == 0.0
        assert result.forward_passes == 3

    def test_members_offset_by_five_mm(self, tiny_checkpoints):
        ckpt, _, observed = tiny_checkpoints
        shifted = dict(ckpt.state_dict)
        bias = shifted["output_mlp.2.bias"].clone()
        bias[0] += 0.005                      # network units are metres
        shifted["output_mlp.2.bias"] = bias
        other = dataclasses.replace(ckpt, state_dict=shifted)
        result = ensemble_uncertainty([ckpt, other], observed)
        np.testing.assert_allclose(result.per_sample, 2.5, atol=1e-3)

    def test_mismatched_architectures(self, tiny_checkpoints):
        with_dropout, no_dropout, observed = tiny_checkpoints
        with pytest.raises(ArchitectureMismatchError):
            ensemble_uncertainty([with_dropout, no_dropout], observed)

    def test_forward_pass_accounting(self, tiny_checkpoints, quick_model):
        ckpt, _, observed = tiny_checkpoints
        model, motions = quick_model
        assert epu_score(model, motions[:4]).forecaster_passes == 0
        assert mc_dropout_uncertainty(ckpt, observed, passes=10).forward_passes == 10
        assert ensemble_uncertainty([ckpt] * 5, observed).forward_passes == 5


# ---------------------------------------------------------------------------
# Desk-scale acceptance runs
# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("k", [3, 5, 8])
def test_planted_cluster_count_recovered(k):
    hits = 0
    for seed in range(10):
        z, _ = _blobs(k, 600, sigma=0.01, separation=1.0, dim=16, seed=seed)
        found, _ = estimate_k(z, EpistemicConfig(seed=seed))
        hits += found == k
    assert hits >= 8


_ACCEPT = EpistemicConfig(latent_dim=16, hidden_dim=64, ae_epochs=40, finetune_epochs=5)


def _family_windows(family_id: int, num_sequences: int, first_seed: int):
    spec = canonical_family_specs()[family_id]
    samples = []
    for s in range(num_sequences):
        samples.extend(window(generate_family(spec, 300, seed=first_seed + s), O=10, T=25, stride=5))
    return samples


@lru_cache(maxsize=None)
def _trained_on(family_id: int):
    """Forecaster and cluster model fitted on one family's training windows."""
    train_set = _family_windows(family_id, 8, first_seed=100 * family_id)
    net = STTransConfig(num_blocks=2, model_width=32, num_heads=4, mlp_hidden=64, dropout_rate=0.1)
    ckpt = train("st_trans", train_set, TrainConfig(epochs=10, seed=0, prior={"family": "sig5"}), net)
    motions = np.stack([s.future for s in train_set])
    ae = pretrain_autoencoder(motions, _ACCEPT, seed=0)
    K, _ = estimate_k(encode_motions(ae, motions), _ACCEPT)
    return ckpt, fit_clusters(ae, motions, K, 1.0, _ACCEPT)


def _forecast_epu(family_id: int, trained_on: int):
    ckpt, model = _trained_on(trained_on)
    observed, _ = stack_samples(_family_windows(family_id, 3, first_seed=100 * family_id + 50))
    return epu_score(model, forecast(ckpt, observed).y_hat.numpy())


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_clustering_does_not_degrade_purity(seed):
    motions, labels = [], []
    for spec in canonical_family_specs():
        for sample in _family_windows(spec.family_id, 3, first_seed=1000 * seed + 10 * spec.family_id):
            motions.append(sample.future)
            labels.append(spec.family_id)
    motions = np.stack(motions)
    cfg = EpistemicConfig(latent_dim=16, hidden_dim=64, ae_epochs=30, finetune_epochs=5, seed=seed)
    model = fit_clusters(pretrain_autoencoder(motions, cfg, seed=seed), motions, 3, 1.0, cfg)
    assert cluster_purity(labels, model.train_labels) >= cluster_purity(labels, model.init_labels)


@pytest.mark.slow
@pytest.mark.parametrize("family_a,family_b", [(0, 1), (1, 2), (2, 0)])
def test_unseen_family_is_separable_by_epu(family_a, family_b):
    seen = _forecast_epu(family_a, trained_on=family_a)
    unseen = _forecast_epu(family_b, trained_on=family_a)
    assert auroc(seen.per_sample_entropy, unseen.per_sample_entropy) >= 0.9


@pytest.mark.slow
def test_shuffled_forecasts_raise_epu():
    ckpt, model = _trained_on(0)
    test_set = _family_windows(0, 3, first_seed=50)
    observed, _ = stack_samples(test_set)
    y_hat = forecast(ckpt, observed).y_hat.numpy()
    samples = [ForecastSample(observed[i], y_hat[i], s.source_id) for i, s in enumerate(test_set)]
    frames = np.stack([shuffle_frames(s, i).future for i, s in enumerate(samples)])
    joints = np.stack([shuffle_joints(s, i).future for i, s in enumerate(samples)])
    normal = epu_score(model, y_hat).epu
    assert normal < epu_score(model, frames).epu < epu_score(model, joints).epu
