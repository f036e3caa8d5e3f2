import dataclasses
import io

import numpy as np
import pytest

from sta_reid import harness
from sta_reid.checkpoint import load_checkpoint, save_checkpoint
from sta_reid.config import RunConfig
from sta_reid.data import SynthConfig, Tracklet, synth_generate, synth_probe_clip
from sta_reid.errors import ConfigurationError, VersionError
from sta_reid.losses import LabeledBatch
from sta_reid.metrics import RetrievalSet, evaluate_retrieval, load_embeddings
from sta_reid.numerics import GradPair, gradcheck

from conftest import occlusion_synth_config, tiny_run_config, tiny_synth_config


class TestClipBatchLoss:
    def toy_inputs(self, aggregator="sta", seed=0):
        rng = np.random.default_rng(seed)
        b, n, h, w, d, e, c = 4, 2, 4, 2, 3, 5, 2
        cfg = tiny_run_config(n_frames=n, k_regions=2, p=2, k_per_id=2,
                              embed_dim=e, feat_channels=d, aggregator=aggregator)
        fmaps = rng.uniform(0.2, 1.0, size=(b, n, h, w, d))
        labels = np.array([0, 0, 1, 1])
        params = {
            "head.w": rng.normal(0, 0.5, size=(2 * d, e)),
            "head.b": rng.normal(0, 0.1, size=e),
            "cls.w": rng.normal(0, 0.5, size=(e, c)),
            "cls.b": rng.normal(0, 0.1, size=c),
        }
        pairs = [(0, 1)] * b
        return cfg, fmaps, labels, params, pairs

    @pytest.mark.parametrize("aggregator", ["sta", "sta_no_fusion", "average", "none"])
    def test_composed_gradcheck(self, aggregator):
        cfg, fmaps, labels, params, pairs = self.toy_inputs(aggregator)

        def fn(t):
            report, grads = harness.clip_batch_loss(t, labels, params, cfg, pairs)
            return GradPair(np.float64(report.total), lambda d: grads["fmaps"] * d)

        assert gradcheck(fn, fmaps) < 1e-5

    def test_head_and_classifier_gradcheck(self):
        cfg, fmaps, labels, params, pairs = self.toy_inputs()
        for key in ("head.w", "head.b", "cls.w", "cls.b"):
            def fn(t, key=key):
                patched = dict(params)
                patched[key] = t
                report, grads = harness.clip_batch_loss(fmaps, labels, patched, cfg, pairs)
                return GradPair(np.float64(report.total), lambda d: grads[key] * d)

            assert gradcheck(fn, params[key]) < 1e-5

    def test_report_composition(self):
        cfg, fmaps, labels, params, pairs = self.toy_inputs()
        report, _ = harness.clip_batch_loss(fmaps, labels, params, cfg, pairs)
        assert report.total == pytest.approx(
            report.l_softmax + report.l_triplet + cfg.lam * report.reg, abs=1e-9)

    def test_lambda_zero_matches_disabled_reg(self):
        cfg, fmaps, labels, params, pairs = self.toy_inputs()
        with_reg = dataclasses.replace(cfg, lam=0.0)
        without = dataclasses.replace(cfg, use_reg=False)
        r1, g1 = harness.clip_batch_loss(fmaps, labels, params, with_reg, pairs)
        r2, g2 = harness.clip_batch_loss(fmaps, labels, params, without)
        assert r1.total == pytest.approx(r2.total, abs=1e-12)
        np.testing.assert_allclose(g1["fmaps"], g2["fmaps"], atol=1e-12)

    def test_missing_reg_pairs_rejected(self):
        cfg, fmaps, labels, params, _ = self.toy_inputs()
        with pytest.raises(ConfigurationError, match="pair"):
            harness.clip_batch_loss(fmaps, labels, params, cfg, None)


class TestTrain:
    def test_loss_descends_on_separable_set(self, tiny_run):
        history = tiny_run.history
        assert history[-1].total < history[0].total

    def test_deterministic_history_and_checkpoint(self, tiny_cfg, tiny_dataset, tiny_run, tmp_path):
        again = harness.train(tiny_cfg, dataset=tiny_dataset)
        assert again.history == tiny_run.history
        a, b = tmp_path / "a.stac", tmp_path / "b.stac"
        save_checkpoint(a, tiny_run.checkpoint)
        save_checkpoint(b, again.checkpoint)
        assert a.read_bytes() == b.read_bytes()

    def test_resume_reproduces_trajectory(self, tiny_dataset, tmp_path):
        # the resumed run goes through a disk round trip, so this also pins
        # the float32-everywhere training contract
        full_cfg = tiny_run_config(epochs=6)
        half_cfg = tiny_run_config(epochs=3)
        full = harness.train(full_cfg, dataset=tiny_dataset)
        half = harness.train(half_cfg, dataset=tiny_dataset)
        save_checkpoint(tmp_path / "half.stac", half.checkpoint)
        resumed = harness.train(full_cfg, dataset=tiny_dataset,
                                resume=load_checkpoint(tmp_path / "half.stac"))
        assert resumed.history == full.history[3:]
        for name in full.checkpoint.params:
            np.testing.assert_array_equal(resumed.checkpoint.params[name],
                                          full.checkpoint.params[name])

    def test_invalid_combination_rejected_before_training(self, tiny_dataset):
        cfg = tiny_run_config(n_frames=1, use_reg=True)
        with pytest.raises(ConfigurationError, match="n_frames"):
            harness.train(cfg, dataset=tiny_dataset)

    def test_too_few_identities_rejected(self, tiny_dataset):
        cfg = tiny_run_config(p=64)
        with pytest.raises(ConfigurationError, match="identities"):
            harness.train(cfg, dataset=tiny_dataset)

    @pytest.mark.parametrize("aggregator,use_triplet,use_reg", [
        ("none", False, False),    # plain softmax baseline
        ("average", True, False),  # frame averaging with metric loss
        ("sta_no_fusion", True, False),
        ("sta", True, True),       # full arm
    ])
    def test_every_ablation_arm_trains_by_config_alone(self, tiny_dataset, aggregator,
                                                       use_triplet, use_reg):
        cfg = tiny_run_config(epochs=2, steps_per_epoch=2, aggregator=aggregator,
                              use_triplet=use_triplet, use_reg=use_reg)
        result = harness.train(cfg, dataset=tiny_dataset)
        assert len(result.history) == 2
        assert np.isfinite(result.history[-1].total)

    def test_feature_tracklets_train_without_backbone(self):
        rng = np.random.default_rng(0)
        tracklets = []
        tid = 0
        for identity in range(4):
            base = rng.uniform(0.2, 1.0, size=(1, 4, 2, 8)).astype(np.float32)
            for _ in range(2):
                feats = np.repeat(base, 5, axis=0) + rng.uniform(0, 0.05, size=(5, 4, 2, 8)).astype(np.float32)
                tracklets.append(Tracklet(identity=identity, camera=tid % 2,
                                          tracklet_id=tid, features=feats))
                tid += 1
        from sta_reid.data import TrackletDataset

        ds = TrackletDataset(train=tracklets)
        cfg = tiny_run_config(epochs=2, steps_per_epoch=2, p=2, k_per_id=2, k_regions=2)
        result = harness.train(cfg, dataset=ds)
        assert np.isfinite(result.history[-1].total)


class TestEvaluate:
    def test_variable_length_from_single_checkpoint(self, tiny_cfg, tiny_dataset, tiny_run):
        for n in (2, 4, 6, 8):
            report = harness.evaluate(tiny_cfg, tiny_run.checkpoint, dataset=tiny_dataset, test_n=n)
            assert report.num_evaluated == len(tiny_dataset.query)

    def test_train_split_separates(self, tiny_cfg, tiny_dataset, tiny_run):
        report = harness.evaluate(tiny_cfg, tiny_run.checkpoint, dataset=tiny_dataset, split="train")
        assert report.rank_accuracy[1] >= 0.9

    def test_empty_query_set(self, tiny_cfg, tiny_run, tiny_dataset):
        from sta_reid.data import TrackletDataset

        ds = TrackletDataset(train=tiny_dataset.train, query=[], gallery=tiny_dataset.gallery)
        report = harness.evaluate(tiny_cfg, tiny_run.checkpoint, dataset=ds)
        assert report.num_evaluated == 0

    def test_incompatible_checkpoint_is_version_error(self, tiny_cfg, tiny_dataset, tiny_run):
        bad_cfg = dataclasses.replace(tiny_cfg, embed_dim=tiny_cfg.embed_dim + 1)
        with pytest.raises(VersionError):
            harness.evaluate(bad_cfg, tiny_run.checkpoint, dataset=tiny_dataset)

    def test_repeat_and_average_random_clips(self, tiny_dataset, tiny_run):
        cfg = tiny_run_config(eval_frames="random", eval_repeats=3)
        report = harness.evaluate(cfg, tiny_run.checkpoint, dataset=tiny_dataset)
        assert report.num_evaluated == len(tiny_dataset.query)


class TestExtract:
    def test_file_evaluation_matches_in_process(self, tiny_cfg, tiny_dataset, tiny_run, tmp_path):
        qpath = tmp_path / "query.stae"
        gpath = tmp_path / "gallery.stae"
        harness.extract(tiny_cfg, tiny_run.checkpoint, tiny_dataset.query, qpath)
        harness.extract(tiny_cfg, tiny_run.checkpoint, tiny_dataset.gallery, gpath)
        q_emb, q_ids, q_cams, _ = load_embeddings(qpath)
        g_emb, g_ids, g_cams, g_flag = load_embeddings(gpath)
        from_files = evaluate_retrieval(RetrievalSet(q_emb, q_ids, q_cams,
                                                     g_emb, g_ids, g_cams, g_flag))
        in_process = harness.evaluate(tiny_cfg, tiny_run.checkpoint, dataset=tiny_dataset)
        assert from_files.rank_accuracy == in_process.rank_accuracy
        assert from_files.map_score == in_process.map_score

    def test_single_tracklet_count(self, tiny_cfg, tiny_dataset, tiny_run, tmp_path):
        path = tmp_path / "one.stae"
        harness.extract(tiny_cfg, tiny_run.checkpoint, tiny_dataset.query[:1], path)
        emb, ids, _, _ = load_embeddings(path)
        assert emb.shape == (1, tiny_cfg.embed_dim)
        assert ids[0] == tiny_dataset.query[0].identity

    def test_byte_identical_across_runs(self, tiny_cfg, tiny_dataset, tiny_run, tmp_path):
        a, b = tmp_path / "a.stae", tmp_path / "b.stae"
        harness.extract(tiny_cfg, tiny_run.checkpoint, tiny_dataset.query, a)
        harness.extract(tiny_cfg, tiny_run.checkpoint, tiny_dataset.query, b)
        assert a.read_bytes() == b.read_bytes()


class TestDumpAttention:
    def test_row_count_and_column_sums(self, tiny_cfg, tiny_dataset, tiny_run):
        scores = harness.dump_attention(tiny_cfg, tiny_run.checkpoint, tiny_dataset.query[0], test_n=4)
        assert scores.shape == (4, tiny_cfg.k_regions)
        np.testing.assert_allclose(scores.sum(axis=0), np.ones(tiny_cfg.k_regions), atol=1e-5)

    def test_identical_frames_give_uniform_scores(self, tiny_cfg, tiny_run, tiny_dataset):
        frame = tiny_dataset.query[0].frames[0]
        t = Tracklet(identity=0, camera=0, tracklet_id=0, frames=np.tile(frame, (4, 1, 1, 1)))
        scores = harness.dump_attention(tiny_cfg, tiny_run.checkpoint, t, test_n=4)
        np.testing.assert_allclose(scores, np.full_like(scores, 0.25), atol=1e-5)

    def test_occluded_region_scores_below_clean_frames(self, occlusion_run):
        cfg, run = occlusion_run
        synth_cfg = occlusion_synth_config()
        hits = 0
        for seed in range(10):
            clip = synth_probe_clip(synth_cfg, np.random.default_rng(seed), n_frames=4,
                                    occluded_frame=1, region=2, k_regions=4)
            scores = harness.dump_attention(cfg, run.checkpoint, clip, test_n=4)
            others = np.delete(scores[:, 2], 1)
            if scores[1, 2] < others.min():
                hits += 1
        assert hits >= 8
