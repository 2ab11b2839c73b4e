import numpy as np
import pytest

from docnmt import bpe as B
from docnmt import corpus as C
from docnmt import tensor as T
from docnmt import training as TR
from docnmt.model import (ContextCache, ModelConfig, TranslationModel,
                          VARIANTS, load_checkpoint, save_checkpoint)

from model_helpers import tiny_task


def copy_corpus(n_docs=10, seed=0):
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(n_docs):
        toks = [f"w{int(k)}" for k in rng.integers(0, 8,
                                                   size=int(rng.integers(3, 6)))]
        toks.append(".")
        docs.append(C.Document(f"d{d}", [(toks, toks)]))
    vocab = B.build_vocab([s for d in docs for s in d.src_sentences])
    return docs, vocab


@pytest.fixture(scope="module")
def synth_setup():
    docs, seg, metas, src_v, trg_v = tiny_task(n_docs=6, seed=8)
    return seg, src_v, trg_v


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TR.TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TR.TrainConfig(lr=0.0)


class TestSelectBest:
    def _log(self, scores):
        return TR.TrainLog([TR.EpochRecord(i + 1, 1.0, s, 0.1)
                            for i, s in enumerate(scores)])

    def test_monotone_improving_takes_last(self):
        log = self._log([1.0, 2.0, 3.0])
        assert TR.select_best(log, ["a", "b", "c"]) == "c"

    def test_single_epoch(self):
        log = self._log([5.0])
        assert TR.select_best(log, ["only"]) == "only"

    def test_tie_takes_earliest(self):
        log = self._log([10.0, 12.0, 12.0])
        assert log.best_epoch == 2
        assert TR.select_best(log, ["a", "b", "c"]) == "b"

    def test_checkpoint_count_must_match(self):
        log = self._log([1.0, 2.0])
        with pytest.raises(ValueError):
            TR.select_best(log, ["a"])


class TestTrainLogFile:
    def test_round_trip(self, tmp_path):
        log = TR.TrainLog([TR.EpochRecord(1, 2.5, 10.0, 3.25),
                           TR.EpochRecord(2, 1.25, 12.5, 3.5)])
        path = tmp_path / "log.tsv"
        log.save(path)
        loaded = TR.TrainLog.load(path)
        assert [(r.epoch, r.loss, r.dev_bleu) for r in loaded.records] == \
            [(r.epoch, r.loss, r.dev_bleu) for r in log.records]


class TestPretrain:
    def test_initial_loss_near_log_vocab(self, synth_setup):
        seg, src_v, trg_v = synth_setup
        model = TranslationModel(
            ModelConfig("baseline", 32, 32, len(src_v), len(trg_v)),
            rng=T.make_rng(0, 0))
        batch = C.build_batch(seg, src_v, trg_v)
        loss, _, _, _ = model.forward_loss(batch.positions[0],
                                           ContextCache.empty())
        T.backward(loss)
        assert abs(float(loss.data) - np.log(len(trg_v))) < 0.05 * np.log(len(trg_v))

    def test_memorization_smoke(self):
        docs, vocab = copy_corpus()
        mcfg = ModelConfig("baseline", 32, 32, len(vocab), len(vocab))
        tcfg = TR.TrainConfig(epochs=60, lr=0.1, max_docs_per_batch=1, seed=5)
        best, log = TR.pretrain_baseline(docs, docs, vocab, vocab, mcfg, tcfg)
        assert log.records[-1].loss < 0.1
        assert max(r.dev_bleu for r in log.records) > 99.0

    def test_fixed_seed_reproduces_log(self, synth_setup):
        seg, src_v, trg_v = synth_setup
        mcfg = ModelConfig("baseline", 16, 16, len(src_v), len(trg_v))
        tcfg = TR.TrainConfig(epochs=2, lr=0.1, max_docs_per_batch=4, seed=9)
        _, log_a = TR.pretrain_baseline(seg, seg, src_v, trg_v, mcfg, tcfg)
        _, log_b = TR.pretrain_baseline(seg, seg, src_v, trg_v, mcfg, tcfg)
        assert [(r.loss, r.dev_bleu) for r in log_a.records] == \
            [(r.loss, r.dev_bleu) for r in log_b.records]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self, synth_setup):
        seg, src_v, trg_v = synth_setup
        model = TranslationModel(
            ModelConfig("baseline", 16, 16, len(src_v), len(trg_v)),
            rng=T.make_rng(1, 0))
        model.params["out_proj"].data[:, 0] = np.inf
        tcfg = TR.TrainConfig(epochs=1, lr=0.1, max_docs_per_batch=4, seed=1)
        with pytest.raises(TR.TrainingDiverged, match="epoch 1"):
            TR.train_model(model, seg, seg, src_v, trg_v, tcfg)

    def test_non_baseline_config_rejected(self, synth_setup):
        seg, src_v, trg_v = synth_setup
        mcfg = ModelConfig("shared-target", 16, 16, len(src_v), len(trg_v))
        with pytest.raises(ValueError):
            TR.pretrain_baseline(seg, seg, src_v, trg_v, mcfg,
                                 TR.TrainConfig(epochs=1))


class TestGradientClipping:
    def test_norm_bounded_after_every_backward(self, synth_setup, monkeypatch):
        seg, src_v, trg_v = synth_setup
        seen = []
        original = T.clip_global_norm

        def spy(params, max_norm):
            before = original(params, max_norm)
            after = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                                for p in params if p.grad is not None))
            seen.append((before, after, max_norm))
            return before

        monkeypatch.setattr(TR.T, "clip_global_norm", spy)
        mcfg = ModelConfig("baseline", 16, 16, len(src_v), len(trg_v))
        tcfg = TR.TrainConfig(epochs=1, lr=0.1, max_docs_per_batch=2, seed=2,
                              grad_clip_norm=0.01)
        TR.train_model(
            TranslationModel(mcfg, rng=T.make_rng(2, 0)),
            seg, seg, src_v, trg_v, tcfg)
        assert seen
        assert any(before > 0.01 for before, _, _ in seen)  # clip engaged
        for before, after, max_norm in seen:
            assert max_norm == 0.01
            assert after <= max_norm * (1 + 1e-5)


class TestContextBuildOrder:
    def test_cache_uses_states_from_previous_position(self, synth_setup,
                                                      monkeypatch):
        seg, src_v, trg_v = synth_setup
        monkeypatch.setattr(TR, "_dev_bleu", lambda *a, **k: 0.0)
        model = TranslationModel(
            ModelConfig("shared-source", 16, 16, len(src_v), len(trg_v)),
            rng=T.make_rng(3, 0))
        events = []
        orig_forward = model.forward_loss
        orig_cache = model.context_states

        def forward_spy(*args, **kwargs):
            out = orig_forward(*args, **kwargs)
            events.append(("forward", id(out[1])))
            return out

        def cache_spy(**kwargs):
            prev = kwargs.get("prev_encoder")
            events.append(("cache", None if prev is None else id(prev)))
            return orig_cache(**kwargs)

        model.forward_loss = forward_spy
        model.context_states = cache_spy
        tcfg = TR.TrainConfig(epochs=1, lr=0.1, max_docs_per_batch=3, seed=4)
        TR.train_model(model, seg, seg, src_v, trg_v, tcfg)

        last_forward = None
        saw_linked_cache = False
        for kind, ref in events:
            if kind == "forward":
                last_forward = ref
            elif ref is not None:
                assert ref == last_forward
                saw_linked_cache = True
        assert saw_linked_cache


@pytest.fixture(scope="module")
def baseline(synth_setup):
    seg, src_v, trg_v = synth_setup
    mcfg = ModelConfig("baseline", 16, 16, len(src_v), len(trg_v))
    tcfg = TR.TrainConfig(epochs=3, lr=0.1, max_docs_per_batch=4, seed=6)
    best, log = TR.pretrain_baseline(seg, seg, src_v, trg_v, mcfg, tcfg)
    return best, log


class TestFineTune:
    def test_zero_block_init_matches_baseline_dev_bleu(self, synth_setup,
                                                       baseline):
        seg, src_v, trg_v = synth_setup
        base, _ = baseline
        base_bleu = TR._dev_bleu(base, seg, src_v, trg_v)
        for variant in VARIANTS:
            if variant == "baseline":
                continue
            model = TR.init_from_baseline(base, variant, T.make_rng(0, 3))
            assert TR._dev_bleu(model, seg, src_v, trg_v) == base_bleu

    def test_all_variants_accept_the_same_checkpoint(self, synth_setup,
                                                     baseline, tmp_path):
        seg, src_v, trg_v = synth_setup
        base, _ = baseline
        prefix = str(tmp_path / "base")
        save_checkpoint(base, prefix)
        tcfg = TR.TrainConfig(epochs=1, lr=0.1, max_docs_per_batch=4, seed=7)
        for variant in VARIANTS:
            if variant == "baseline":
                continue
            loaded = load_checkpoint(prefix)
            best, log = TR.fine_tune_context(loaded, variant, seg, seg,
                                             src_v, trg_v, tcfg)
            assert best.cfg.variant == variant
            assert len(log.records) == 1

    def test_never_mutates_baseline_checkpoint(self, synth_setup, baseline,
                                               tmp_path):
        seg, src_v, trg_v = synth_setup
        base, _ = baseline
        prefix = str(tmp_path / "frozen")
        save_checkpoint(base, prefix)
        before = (tmp_path / "frozen.bin").read_bytes()
        loaded = load_checkpoint(prefix)
        TR.fine_tune_context(loaded, "shared-target", seg, seg, src_v, trg_v,
                             TR.TrainConfig(epochs=1, lr=0.1,
                                            max_docs_per_batch=4, seed=8))
        assert (tmp_path / "frozen.bin").read_bytes() == before

    def test_vocab_mismatch_rejected(self, synth_setup, baseline):
        seg, src_v, trg_v = synth_setup
        base, _ = baseline
        small = B.build_vocab([["a"]])
        with pytest.raises(ValueError):
            TR.fine_tune_context(base, "shared-target", seg, seg, small,
                                 trg_v, TR.TrainConfig(epochs=1))

    def test_frozen_zero_context_matches_continued_baseline(self, synth_setup,
                                                            baseline):
        seg, src_v, trg_v = synth_setup
        base, _ = baseline
        tcfg = TR.TrainConfig(epochs=3, lr=0.1, max_docs_per_batch=4, seed=11)

        cont = TranslationModel(
            base.cfg, params={n: T.Tensor(p.data.copy(), requires_grad=True)
                              for n, p in base.params.items()})
        _, log_base = TR.train_model(cont, seg, seg, src_v, trg_v, tcfg)
        _, log_frozen = TR.fine_tune_context(base, "shared-target", seg, seg,
                                             src_v, trg_v, tcfg,
                                             freeze_context=True)
        for rb, rf in zip(log_base.records, log_frozen.records):
            np.testing.assert_allclose(rf.loss, rb.loss, rtol=1e-5)
            np.testing.assert_allclose(rf.dev_bleu, rb.dev_bleu, atol=1e-9)

    def test_init_from_baseline_rejects_baseline(self, baseline):
        base, _ = baseline
        with pytest.raises(ValueError):
            TR.init_from_baseline(base, "baseline", T.make_rng(0, 3))
