import hashlib

import numpy as np
import pytest

from promptseg.corpus import PromptCorpusConfig, generate_prompt_corpus
from promptseg.embedding import embed_hashed
from promptseg.errors import CorpusMisaligned
from promptseg.fusion import init_fusion
from promptseg.grids import LabelMap, argmax_channels, softmax_channels
from promptseg.metrics import evaluate_labelmaps
from promptseg.phantom import (
    LogitOracleConfig,
    generate_phantom,
    oracle_logits,
    random_phantom_spec,
)
from promptseg.pipelines import (
    InferenceConfig,
    OracleLogitSource,
    TrainRunConfig,
    evaluate_run,
    infer,
    train_fusion,
    windowed_logits,
)
from promptseg.prompts import default_lexicon, parse_prompt
from promptseg.volio import save_grid


LEX = default_lexicon()


def tiny_setup(seed=0, n_volumes=2):
    volumes = []
    for i in range(n_volumes):
        spec = random_phantom_spec(
            seed + i, dims=(24, 24, 24), organ_ids=(1, 2, 3, 6, 7), radius_range=(3, 5)
        )
        volumes.append(generate_phantom(spec))
    corpus = generate_prompt_corpus(
        [lm for _, lm in volumes],
        PromptCorpusConfig(n_train=24, n_val=6, seed=seed, relation_probability=0.4),
        LEX,
    )
    source = OracleLogitSource(
        LogitOracleConfig(scale=8.0, noise_sigma=0.25), num_classes=14,
        suppress_prompted=True,
    )
    cfg = TrainRunConfig(
        epochs=2, iterations_per_epoch=10, patch_dims=(16, 16, 16), seed=seed,
        pos_fraction=1.0,
    )
    return volumes, corpus[:24], source, cfg


class TestTrainFusion:
    def test_zero_epochs_returns_init(self):
        volumes, corpus, source, cfg = tiny_setup()
        cfg.epochs = 0
        ckpt, history, _ = train_fusion(volumes, source, corpus, cfg, LEX)
        init = init_fusion(14, cfg.seed)
        for name in ("w1", "b1", "w2", "b2"):
            assert np.array_equal(getattr(ckpt.params, name), getattr(init, name))
        assert (ckpt.params.alpha, ckpt.params.beta) == (0.1, 0.1)
        assert history == []

    def test_seeded_rerun_bit_identical(self):
        volumes, corpus, source, cfg = tiny_setup(seed=1)
        a, hist_a, log_a = train_fusion(volumes, source, corpus, cfg, LEX)
        b, hist_b, log_b = train_fusion(volumes, source, corpus, cfg, LEX)
        for name in ("w1", "b1", "w2", "b2"):
            assert np.array_equal(getattr(a.params, name), getattr(b.params, name))
        assert a.params.alpha == b.params.alpha
        assert log_a == log_b
        assert [h.as_tuple() for h in hist_a] == [h.as_tuple() for h in hist_b]

    def test_loss_log_shape(self):
        volumes, corpus, source, cfg = tiny_setup(seed=2)
        _, history, log_lines = train_fusion(volumes, source, corpus, cfg, LEX)
        assert len(history) == cfg.epochs * cfg.iterations_per_epoch
        assert len(log_lines) == len(history) + 1  # header
        assert log_lines[0].startswith("#")
        fields = log_lines[1].split("\t")
        assert len(fields) == 3 + 7  # epoch, iter, lr + breakdown

    def test_misaligned_corpus_rejected(self):
        volumes, corpus, source, cfg = tiny_setup(seed=3)
        bad = parse_prompt("segment the pancreas", LEX)  # absent from phantoms
        with pytest.raises(CorpusMisaligned):
            train_fusion(volumes, source, [("segment the pancreas", bad)], cfg, LEX)

    def test_frozen_inputs_untouched(self):
        volumes, corpus, source, cfg = tiny_setup(seed=4)

        def digest():
            h = hashlib.sha256()
            for vol, labels in volumes:
                h.update(vol.data.tobytes())
                h.update(labels.data.tobytes())
            for text, _ in corpus:
                h.update(embed_hashed(text).tobytes())
            return h.hexdigest()

        before = digest()
        train_fusion(volumes, source, corpus, cfg, LEX)
        assert digest() == before


class TestInfer:
    def case(self, seed=0):
        spec = random_phantom_spec(seed, dims=(20, 20, 20), organ_ids=(1, 6), radius_range=(3, 5))
        _, labels = generate_phantom(spec)
        logits = oracle_logits(labels, LogitOracleConfig(scale=6.0, noise_sigma=0.3, seed=seed), 14)
        return labels, logits

    def test_zeroed_fusion_matches_visual_argmax(self):
        _, logits = self.case(1)
        params = init_fusion(14, 0)
        params.alpha = 0.0
        params.beta = 0.0
        result = infer(logits, "segment the liver", params, LEX)
        visual = argmax_channels(softmax_channels(logits))
        assert np.array_equal(result.mask.data, visual.data)
        assert not result.fallback_visual_only

    def test_empty_prompt_falls_back(self):
        _, logits = self.case(2)
        params = init_fusion(14, 0)
        result = infer(logits, "", params, LEX)
        assert result.fallback_visual_only
        visual = argmax_channels(softmax_channels(logits))
        assert np.array_equal(result.mask.data, visual.data)
        assert np.all(result.alpha_bias == 0.0)

    def test_restrict_to_prompt_masks_unmentioned(self):
        labels, logits = self.case(3)
        params = init_fusion(14, 0)
        params.alpha = 0.0
        params.beta = 0.0
        result = infer(
            logits, "segment the liver", params, LEX,
            InferenceConfig(restrict_to_prompt=True),
        )
        kept = set(np.unique(result.mask.data))
        assert kept <= {0, 6}
        unrestricted = infer(logits, "segment the liver", params, LEX)
        at6 = unrestricted.mask.data == 6
        assert np.array_equal(result.mask.data[at6], unrestricted.mask.data[at6])

    def test_relation_prompt_uses_visual_anchors(self):
        labels, logits = self.case(4)
        params = init_fusion(14, 0)
        result = infer(
            logits,
            "segment the region around the spleen that belongs to the liver",
            params,
            LEX,
        )
        assert (1, 6) in result.relations_used
        assert result.skipped_relations == ()

    def test_relation_with_absent_anchor_skipped(self):
        _, logits = self.case(5)  # phantom contains only spleen and liver
        params = init_fusion(14, 0)
        result = infer(
            logits,
            "the region around the stomach that belongs to the liver",
            params,
            LEX,
        )
        assert (7, 6) in result.skipped_relations

    def test_suppressed_visual_only_loses_organ(self):
        spec = random_phantom_spec(6, dims=(20, 20, 20), organ_ids=(1, 6), radius_range=(3, 5))
        _, labels = generate_phantom(spec)
        logits = oracle_logits(
            labels,
            LogitOracleConfig(scale=8.0, noise_sigma=0.25,
                              suppressed_classes=frozenset({6}), seed=0),
            14,
        )
        params = init_fusion(14, 0)
        params.alpha = 0.0
        params.beta = 0.0
        result = infer(logits, "segment the liver", params, LEX)
        at6 = labels.data == 6
        assert (result.mask.data[at6] == 6).mean() < 0.05


class TestRefinedIdentity:
    def test_zero_fusion_identity_holds_through_refinement(self):
        from promptseg.refine import init_refine, refine_forward

        spec = random_phantom_spec(9, dims=(20, 20, 20), organ_ids=(1, 6), radius_range=(3, 5))
        _, labels = generate_phantom(spec)
        logits = oracle_logits(labels, LogitOracleConfig(scale=6.0, noise_sigma=0.3, seed=2), 14)
        refine = init_refine(14, 4)
        refine.conv1_w = np.random.default_rng(5).normal(size=(14, 14)) * 0.2
        params = init_fusion(14, 0)
        params.alpha = 0.0
        params.beta = 0.0
        result = infer(logits, "segment the liver", params, LEX, refine_params=refine)
        refined, _ = refine_forward(logits, refine, mode="eval")
        visual = argmax_channels(softmax_channels(refined))
        assert result.mask.data.tobytes() == visual.data.tobytes()


class TestWindowedLogits:
    def test_windowed_identity_at_zero_fusion(self):
        spec = random_phantom_spec(7, dims=(20, 20, 20), organ_ids=(1, 6), radius_range=(3, 5))
        _, labels = generate_phantom(spec)
        source = OracleLogitSource(
            LogitOracleConfig(scale=8.0, noise_sigma=0.1), num_classes=14
        )
        logits = windowed_logits(labels, source, None, (16, 16, 16), overlap=0.25, seed=3)
        assert logits.dims == labels.dims
        params = init_fusion(14, 0)
        params.alpha = 0.0
        params.beta = 0.0
        result = infer(logits, "segment the liver", params, LEX)
        visual = argmax_channels(softmax_channels(logits))
        assert np.array_equal(result.mask.data, visual.data)

    def test_deterministic(self):
        spec = random_phantom_spec(8, dims=(18, 18, 18), organ_ids=(1,), radius_range=(3, 5))
        _, labels = generate_phantom(spec)
        source = OracleLogitSource(
            LogitOracleConfig(scale=4.0, noise_sigma=0.5), num_classes=5
        )
        a = windowed_logits(labels, source, None, (12, 12, 12), seed=9)
        b = windowed_logits(labels, source, None, (12, 12, 12), seed=9)
        assert np.array_equal(a.data, b.data)


class TestEvaluateRun:
    def test_matches_direct_call_and_aggregates(self, tmp_path):
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        rng = np.random.default_rng(0)
        reports = {}
        for name in ("a.vol", "b.vol"):
            gt = LabelMap(rng.integers(0, 3, size=(6, 6, 6)))
            pred = LabelMap(rng.integers(0, 3, size=(6, 6, 6)))
            save_grid(gt, str(gt_dir / name))
            save_grid(pred, str(pred_dir / name))
            reports[name] = evaluate_labelmaps(pred, gt, 3)
        per_volume, aggregate = evaluate_run(str(pred_dir), str(gt_dir), 3)
        for name, direct in reports.items():
            for cid in (1, 2):
                assert per_volume[name].per_organ[cid].dsc == pytest.approx(
                    direct.per_organ[cid].dsc
                )
        want = np.mean(
            [reports["a.vol"].per_organ[1].dsc, reports["b.vol"].per_organ[1].dsc]
        )
        assert aggregate.per_organ[1].dsc == pytest.approx(want)

    def test_missing_pair(self, tmp_path):
        from promptseg.errors import MissingPair

        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        save_grid(LabelMap(np.zeros((2, 2, 2), dtype=np.uint8)), str(gt_dir / "x.vol"))
        with pytest.raises(MissingPair):
            evaluate_run(str(pred_dir), str(gt_dir), 3)
