import numpy as np
import pytest

from farspot import criteria, kws, netcore, pipeline
from farspot.netcore import ModelSpec
from farspot.pipeline import (
    BLANK,
    CORTANA,
    GARBAGE,
    HEY,
    KEYWORD_MODEL,
    SILENCE,
    FarFieldConfig,
    Manifest,
    ManifestRecord,
    PipelineError,
    SynthTaskSpec,
    TrainConfig,
)


def _small_task(**kw):
    defaults = dict(seed=0, n_mels=12, stack_context=4, stack_step=2)
    defaults.update(kw)
    return SynthTaskSpec(**defaults)


def _tiny_model(input_dim, output_dim=5, hidden=8):
    return ModelSpec(input_dim=input_dim, layers=1, hidden=hidden, projection=0,
                     output_dim=output_dim, peepholes=False)


class TestManifests:
    def test_round_trip(self, tmp_path):
        m = Manifest([
            ManifestRecord("a", "/x/a.wav", [0, 1, 2], [0, 1], True, "/x/a_clean.wav"),
            ManifestRecord("b", "/x/b.wav", None, None, False, None),
            ManifestRecord("c", "/x/c.fsfa", [3], None, None, None),
        ])
        p = tmp_path / "m.tsv"
        pipeline.write_manifest(p, m)
        back = pipeline.read_manifest(p)
        assert len(back) == 3
        assert back.records[0].frame_labels == [0, 1, 2]
        assert back.records[0].symbols == [0, 1]
        assert back.records[0].is_positive is True
        assert back.records[0].pair_path == "/x/a_clean.wav"
        assert back.records[1].frame_labels is None
        assert back.records[1].is_positive is False
        assert back.records[2].is_positive is None

    def test_duplicate_ids_rejected(self):
        with pytest.raises(PipelineError):
            Manifest([ManifestRecord("a", "x"), ManifestRecord("a", "y")])

    def test_strip_transcripts_removes_labels_only(self):
        m = Manifest([ManifestRecord("a", "p", [1], [1], True, "q")])
        s = m.strip_transcripts()
        r = s.records[0]
        assert r.frame_labels is None and r.symbols is None
        assert r.is_positive is True and r.pair_path == "q"

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("a\tb\tc\n")
        with pytest.raises(PipelineError):
            pipeline.read_manifest(p)


class TestSynthesis:
    def test_deterministic_under_seed(self):
        spec = _small_task(seed=7)
        a = pipeline.synth_items(spec, 5)
        b = pipeline.synth_items(spec, 5)
        for ia, ib in zip(a, b):
            assert np.array_equal(ia.feats, ib.feats)
            assert np.array_equal(ia.frame_labels, ib.frame_labels)
            assert ia.symbols == ib.symbols

    def test_different_seeds_differ(self):
        a = pipeline.synth_items(_small_task(seed=1), 2)
        b = pipeline.synth_items(_small_task(seed=2), 2)
        assert not np.array_equal(a[0].feats, b[0].feats)

    def test_exact_positive_counts(self):
        items = pipeline.synth_items(_small_task(), 200)
        assert sum(it.is_positive for it in items) == 100
        items = pipeline.synth_items(_small_task(positive_ratio=0.3), 200)
        assert sum(it.is_positive for it in items) == 60

    def test_positive_transcripts_contain_keyword_in_order(self):
        for it in pipeline.synth_items(_small_task(), 30):
            syms = it.symbols
            if it.is_positive:
                assert any(a == HEY and b == CORTANA for a, b in zip(syms, syms[1:]))
            else:
                assert HEY not in syms and CORTANA not in syms

    def test_labels_match_feature_frames(self):
        for it in pipeline.synth_items(_small_task(), 10):
            assert len(it.frame_labels) == it.num_frames
            assert set(np.unique(it.frame_labels)) <= {HEY, CORTANA, SILENCE, GARBAGE}

    def test_corpus_files_round_trip(self, tmp_path):
        spec = _small_task()
        m = pipeline.synth_corpus(spec, 4, tmp_path)
        assert len(m) == 4
        items = pipeline.items_from_manifest(m, spec)
        direct = pipeline.synth_items(spec, 4)
        for got, want in zip(items, direct):
            # WAV quantizes to 16 bits, so features are close but not equal
            assert got.feats.shape == want.feats.shape
            assert np.allclose(got.feats, want.feats, atol=0.1)
            assert np.array_equal(got.frame_labels, want.frame_labels)

    def test_featurized_corpus_loads_from_archives(self, tmp_path):
        spec = _small_task()
        m = pipeline.synth_corpus(spec, 3, tmp_path / "wav")
        fm = pipeline.featurize_corpus(m, spec, tmp_path / "feat")
        items = pipeline.items_from_manifest(fm, spec)
        wav_items = pipeline.items_from_manifest(m, spec)
        for a, b in zip(items, wav_items):
            assert np.allclose(a.feats, b.feats, atol=1e-5)

    def test_ideal_posteriorgram_scores_one(self):
        # one-hot posteriors built from ground-truth labels are a construction
        # oracle: the spotter must find the keyword with confidence 1
        items = [it for it in pipeline.synth_items(_small_task(), 20) if it.is_positive]
        it = items[0]
        rows = np.zeros((it.num_frames, 5))
        rows[np.arange(it.num_frames), it.frame_labels] = 1.0
        det = kws.spot(netcore.Posteriorgram(rows), KEYWORD_MODEL)
        assert det.score == pytest.approx(1.0)
        hey_frames = np.nonzero(np.asarray(it.frame_labels) == HEY)[0]
        cor_frames = np.nonzero(np.asarray(it.frame_labels) == CORTANA)[0]
        assert det.segment[0] == hey_frames[0]
        assert det.segment[1] == cor_frames[-1]


class TestFarField:
    def test_pairs_are_frame_synchronous(self):
        items = pipeline.synth_pair_items(_small_task(), FarFieldConfig(seed=5), 3)
        for it in items:
            assert it.source_feats.shape == it.feats.shape

    def test_farfield_differs_from_clean(self):
        items = pipeline.synth_pair_items(_small_task(), FarFieldConfig(seed=5), 2)
        for it in items:
            assert not np.allclose(it.feats, it.source_feats)

    def test_simulate_corpus_sets_pair_path(self, tmp_path):
        spec = _small_task()
        clean = pipeline.synth_corpus(spec, 3, tmp_path / "clean")
        far = pipeline.simulate_corpus(clean, FarFieldConfig(seed=2), tmp_path / "far")
        for r_far, r_clean in zip(far.records, clean.records):
            assert r_far.pair_path == r_clean.path
            assert r_far.path != r_clean.path
        items = pipeline.items_from_manifest(far, spec)
        assert items[0].source_feats is not None


class TestTraining:
    def _one_item(self):
        return pipeline.synth_items(_small_task(), 1)[0]

    def test_lr_zero_leaves_parameters_unchanged(self):
        it = self._one_item()
        net = netcore.init_network(_tiny_model(it.feats.shape[1]), np.random.default_rng(0))
        out, _ = pipeline.train(net, [it], TrainConfig(learning_rate=0.0, epochs=2))
        assert np.array_equal(out.parameters, net.parameters)

    def test_single_utterance_overfit_decreases_loss(self):
        it = self._one_item()
        net = netcore.init_network(_tiny_model(it.feats.shape[1], hidden=16),
                                   np.random.default_rng(0))
        cfg = TrainConfig(criterion="hard_ce", learning_rate=1e-2, epochs=10,
                          lr_decay=1.0, batch_size=1)
        _, log = pipeline.train(net, [it], cfg)
        assert all(b < a for a, b in zip(log, log[1:]))

    def test_same_seed_gives_bit_identical_models(self):
        items = pipeline.synth_items(_small_task(), 6)
        spec = _tiny_model(items[0].feats.shape[1])
        cfg = TrainConfig(criterion="hard_ce", epochs=2, seed=3)
        runs = []
        for _ in range(2):
            net = netcore.init_network(spec, np.random.default_rng(cfg.seed))
            out, _ = pipeline.train(net, items, cfg)
            runs.append(out.parameters)
        assert np.array_equal(runs[0], runs[1])

    def test_checkpoints_written_per_epoch(self, tmp_path):
        items = pipeline.synth_items(_small_task(), 3)
        net = netcore.init_network(_tiny_model(items[0].feats.shape[1]),
                                   np.random.default_rng(0))
        out, _ = pipeline.train(net, items, TrainConfig(epochs=2),
                                checkpoint_dir=tmp_path)
        assert (tmp_path / "epoch000.ckpt").exists()
        final = netcore.load_checkpoint(tmp_path / "epoch001.ckpt")
        assert np.array_equal(final.parameters, out.parameters)

    def test_ctc_needs_symbols(self):
        it = pipeline.replace_item(self._one_item(), symbols=None)
        net = netcore.init_network(_tiny_model(it.feats.shape[1]), np.random.default_rng(0))
        with pytest.raises(PipelineError):
            pipeline.train(net, [it], TrainConfig(criterion="ctc"))

    def test_empty_training_set_rejected(self):
        net = netcore.init_network(_tiny_model(4), np.random.default_rng(0))
        with pytest.raises(PipelineError):
            pipeline.train(net, [], TrainConfig())

    def test_label_delay_shifts_targets(self):
        # delay 2 trains frame t against the label of frame t-2
        it = self._one_item()
        labels = np.asarray(it.frame_labels)
        delayed = pipeline._delayed(labels, 2)
        assert np.array_equal(delayed[2:], labels[:-2])
        assert delayed[0] == labels[0] and delayed[1] == labels[0]


class TestDistillAndAdapt:
    def test_distill_fixed_point(self):
        # a student identical to the teacher sees exactly-zero soft CE
        # gradients, so one epoch leaves it unchanged
        items = pipeline.synth_items(_small_task(), 4)
        spec = _tiny_model(items[0].feats.shape[1])
        teacher = netcore.init_network(spec, np.random.default_rng(1))
        with_post = pipeline.compute_teacher_posteriors(teacher, items)
        student, _ = pipeline.train(
            teacher.copy(), with_post,
            TrainConfig(criterion="soft_ce", learning_rate=0.5, epochs=1, batch_size=1),
        )
        assert np.array_equal(student.parameters, teacher.parameters)

    def test_distill_needs_no_transcripts(self):
        items = [pipeline.replace_item(it, frame_labels=None, symbols=None)
                 for it in pipeline.synth_items(_small_task(), 4)]
        spec = _tiny_model(items[0].feats.shape[1])
        teacher = netcore.init_network(spec, np.random.default_rng(2))
        student, log = pipeline.distill(teacher, spec, items, TrainConfig(epochs=1))
        assert len(log) == 1

    def test_distill_output_dim_mismatch_rejected(self):
        items = pipeline.synth_items(_small_task(), 2)
        d = items[0].feats.shape[1]
        teacher = netcore.init_network(_tiny_model(d, output_dim=5), np.random.default_rng(0))
        with pytest.raises(PipelineError):
            pipeline.distill(teacher, _tiny_model(d, output_dim=4), items, TrainConfig())

    def test_posterior_cache_reused(self, tmp_path):
        items = pipeline.synth_items(_small_task(), 2)
        spec = _tiny_model(items[0].feats.shape[1])
        teacher = netcore.init_network(spec, np.random.default_rng(3))
        a = pipeline.compute_teacher_posteriors(teacher, items, cache_dir=tmp_path)
        # posteriors now come from the float32 cache files
        b = pipeline.compute_teacher_posteriors(teacher, items, cache_dir=tmp_path)
        for ia, ib in zip(a, b):
            assert np.array_equal(ia.teacher_rows, ib.teacher_rows)
            assert np.allclose(ia.teacher_rows, netcore.forward(teacher, ia.feats).rows,
                               atol=1e-6)

    def test_adapt_fixed_point_on_identical_domains(self):
        # source == target features: the adapted student equals the teacher
        items = pipeline.synth_items(_small_task(), 3)
        items = [pipeline.replace_item(it, source_feats=it.feats) for it in items]
        spec = _tiny_model(items[0].feats.shape[1])
        teacher = netcore.init_network(spec, np.random.default_rng(4))
        student, _ = pipeline.adapt(teacher, items,
                                    TrainConfig(learning_rate=0.5, epochs=2))
        assert np.array_equal(student.parameters, teacher.parameters)

    def test_adapt_needs_no_transcripts(self):
        items = pipeline.synth_pair_items(_small_task(), FarFieldConfig(seed=1), 3)
        items = [pipeline.replace_item(it, frame_labels=None, symbols=None)
                 for it in items]
        spec = _tiny_model(items[0].feats.shape[1])
        teacher = netcore.init_network(spec, np.random.default_rng(5))
        student, log = pipeline.adapt(teacher, items, TrainConfig(epochs=1))
        assert len(log) == 1

    def test_adapt_unpaired_items_rejected(self):
        items = pipeline.synth_items(_small_task(), 2)
        spec = _tiny_model(items[0].feats.shape[1])
        teacher = netcore.init_network(spec, np.random.default_rng(6))
        with pytest.raises(PipelineError):
            pipeline.adapt(teacher, items, TrainConfig())


class TestEvaluationHelpers:
    def test_frame_error_rate_on_constructed_predictions(self):
        items = pipeline.synth_items(_small_task(), 2)
        spec = _tiny_model(items[0].feats.shape[1])
        zero = netcore.Network(spec, np.zeros(netcore.param_count(spec)))
        # all-zero net predicts class 0 everywhere (argmax of uniform rows)
        fer = pipeline.frame_error_rate(zero, items)
        total = sum(it.num_frames for it in items)
        wrong = sum(int(np.sum(np.asarray(it.frame_labels) != 0)) for it in items)
        assert fer == pytest.approx(wrong / total)

    def test_score_kws_produces_one_record_per_item(self):
        items = pipeline.synth_items(_small_task(), 4)
        spec = _tiny_model(items[0].feats.shape[1])
        net = netcore.init_network(spec, np.random.default_rng(7))
        records = pipeline.score_kws(net, items)
        assert len(records) == 4
        for utt_id, score, is_pos, dur in records:
            assert 0.0 <= score <= 1.0
            assert dur is not None

    def test_fa_at_ca_reaches_target(self):
        rng = np.random.default_rng(8)
        records = [(f"u{i}", float(rng.random()), i % 2 == 0, 1.0) for i in range(400)]
        th, fa = pipeline.fa_at_ca(records, 0.9)
        scores = [(s, p) for _, s, p, _ in records]
        assert kws.evaluate(scores, th).ca >= 0.9
        assert 0.0 <= fa <= 1.0


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    cfg = pipeline.LadderConfig(
        seed=0, train_count=8, extra_count=8, test_count=6,
        epochs=1, teacher_epochs=1, hidden=8,
        out_dir=str(tmp_path_factory.mktemp("ladder")),
    )
    return cfg, pipeline.ablation_ladder(cfg)


class TestLadder:
    def test_report_shape(self, report):
        _, rep = report
        stages = [r.stage for r in rep.rows]
        assert stages == ["close-talk", "ce-far", "ts-same-data", "ts-more-data", "ts-rich-sim"]
        assert all(0.0 <= r.far_fer <= 1.0 for r in rep.rows)
        assert all(r.changed_factor for r in rep.rows)
        assert "out of scope" in rep.note

    def test_checkpoints_and_reports_written(self, report):
        cfg, rep = report
        from pathlib import Path

        out = Path(cfg.out_dir)
        for r in rep.rows:
            assert r.checkpoint is not None and Path(r.checkpoint).exists()
        assert (out / "ladder.txt").exists()
        assert (out / "ladder.json").exists()

    def test_stage_metrics_reproducible(self, report):
        # re-running a single stage from its config reproduces the row metric
        cfg, rep = report
        task = pipeline._am_task_spec(cfg.seed)
        train_pairs = pipeline.synth_pair_items(
            task, FarFieldConfig(seed=cfg.seed + 1), cfg.train_count + cfg.extra_count
        )
        test_pairs = pipeline.synth_pair_items(
            task, FarFieldConfig(seed=cfg.seed + 3), cfg.test_count, start_index=10_000
        )
        teacher = netcore.load_checkpoint(rep.rows[0].checkpoint)
        base = TrainConfig(criterion="hard_ce", learning_rate=cfg.learning_rate,
                           epochs=cfg.epochs, seed=cfg.seed)
        ts_same, _ = pipeline.adapt(teacher, train_pairs[: cfg.train_count], base)
        fer = pipeline.frame_error_rate(ts_same, test_pairs)
        assert fer == pytest.approx(rep.rows[2].far_fer, abs=1e-12)


class TestCtcSymbols:
    def test_symbols_are_collapsed_segment_classes(self):
        # adjacent identical classes merge; silence bounds every utterance
        for it in pipeline.synth_items(_small_task(), 10):
            syms = it.symbols
            assert syms[0] == SILENCE and syms[-1] == SILENCE
            assert all(a != b for a, b in zip(syms, syms[1:]))
            assert BLANK not in syms
            assert criteria.ctc_min_frames(syms) <= it.num_frames
