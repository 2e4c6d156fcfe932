import csv
import json
import math

import pytest
import torch

from mixgen import vocab as V
from mixgen.corpus import CorpusSpec, make_text_rows, row_scene
from mixgen.errors import UnparseableCaption
from mixgen.evalsuite import (
    MIN_SHAPE_IOU,
    AccuracyResult,
    EvalReport,
    PromptOutcome,
    chance_bound,
    edit_accuracy,
    estimate_flops,
    generation_accuracy,
    heldout_ddpm_loss,
    outcomes_to_csv,
    parity_flop_ratio,
    perplexity,
    scene_check,
    scene_match,
)
from mixgen.model import ForwardOutput, build_batch_mask, collate, compute_losses, build_model
from mixgen.scenes import SceneSpec, all_specs, render_scene
from mixgen.schedule import make_cosine_schedule
from mixgen.sequence import DiscreteToken, MixedSequence
from conftest import tiny_model_config


class TestSceneCheck:
    def test_exhaustive_grammar_sweep(self):
        for spec in all_specs():
            assert scene_check(spec.caption(), render_scene(spec))

    def test_mismatch_rejected(self):
        blue = render_scene(SceneSpec("square", "blue", "left", "small"))
        assert not scene_check("small red square left", blue)

    def test_five_percent_noise_tolerated(self):
        g = torch.Generator().manual_seed(0)
        for spec in all_specs():
            img = render_scene(spec).clone()
            flat = img.view(3, -1)
            idx = torch.randperm(flat.shape[1], generator=g)[:13]  # 5% of 256
            flat[:, idx] = torch.rand((3, 13), generator=g) * 2 - 1
            assert scene_check(spec.caption(), img)

    def test_garbage_rejected(self):
        g = torch.Generator().manual_seed(1)
        caption = all_specs()[0].caption()
        assert not scene_check(caption, torch.zeros(3, 16, 16))
        assert not scene_check(caption, torch.rand((3, 16, 16), generator=g) * 2 - 1)

    def test_unparseable_caption(self):
        with pytest.raises(UnparseableCaption):
            scene_check("not a caption", torch.zeros(3, 16, 16))

    def test_scene_match_score_range(self):
        spec = all_specs()[10]
        best, score = scene_match(render_scene(spec))
        assert best == spec and score == 1.0
        assert 0.0 < MIN_SHAPE_IOU < 1.0


def test_chance_bound_brute_force():
    assert chance_bound() == pytest.approx(1.0 / 120.0)


class PerfectPredictor:
    """Stub that reads the batch targets and returns confident logits."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, batch, draws, allow):
        b, length = batch.size
        logits = torch.full((b, length, self.cfg.vocab_size), -1e4)
        for r in range(b):
            for i in range(length - 1):
                logits[r, i, batch.tokens[r, i + 1]] = 1e4
        return ForwardOutput(logits=logits, eps_hat=[])


class UniformPredictor:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, batch, draws, allow):
        b, length = batch.size
        return ForwardOutput(logits=torch.zeros(b, length, self.cfg.vocab_size), eps_hat=[])


class TestPerplexity:
    def rows(self, vocab, n=6):
        spec = CorpusSpec(seed=4, count=n)
        scenes = [row_scene(spec, i) for i in range(n)]
        return make_text_rows([s for s in scenes if s is not None], vocab)

    def test_perfect_predictor_is_one(self, vocab):
        model = PerfectPredictor(tiny_model_config())
        assert perplexity(model, self.rows(vocab)) == pytest.approx(1.0)

    def test_uniform_predictor_is_vocab_size(self):
        cfg = tiny_model_config(vocab_size=4)
        rows = [
            MixedSequence(elements=(DiscreteToken(1), DiscreteToken(2), DiscreteToken(3)))
        ]
        model = UniformPredictor(cfg)
        assert perplexity(model, rows) == pytest.approx(4.0)

    def test_matches_lm_loss_cross_module(self, vocab):
        model = build_model(tiny_model_config(), seed=0)
        rows = self.rows(vocab, 4)
        ppl = perplexity(model, rows, batch_size=4)
        length = max(len(r) for r in rows)
        batch = collate(rows, context_len=min(model.cfg.context_len, length))
        _, report = compute_losses(model, batch, [], build_batch_mask(batch), lam=0.0)
        assert ppl == pytest.approx(math.exp(report.lm_loss), rel=1e-10)

    def test_rejects_image_rows(self, vocab):
        from mixgen.sequence import Image, Text, build_sequence
        from conftest import rand_image

        row = build_sequence([Text("x"), Image(rand_image())], vocab, k=4)
        with pytest.raises(ValueError):
            perplexity(PerfectPredictor(tiny_model_config()), [row])


class TestAccuracies:
    def test_empty_prompt_set_flagged(self, vocab):
        model = build_model(tiny_model_config(), seed=1)
        schedule = make_cosine_schedule(50)
        res = generation_accuracy(
            model, [], __import__("mixgen.generate", fromlist=["GenerationParams"]).GenerationParams(diffusion_steps=4, seed=0), schedule, vocab
        )
        assert res.flagged_empty and res.fraction == 0.0

    def test_untrained_model_fails_checker(self, vocab):
        from mixgen.generate import GenerationParams

        model = build_model(tiny_model_config(), seed=2)
        model.eval()
        schedule = make_cosine_schedule(50)
        caps = [s.caption() for s in all_specs()[:4]]
        res = generation_accuracy(
            model, caps, GenerationParams(diffusion_steps=5, cfg_weight=1.0, seed=0), schedule, vocab
        )
        assert res.fraction <= chance_bound() or res.fraction == 0.0
        assert len(res.outcomes) == 4

    def test_edit_accuracy_reports_split(self, vocab):
        from mixgen.generate import GenerationParams

        model = build_model(tiny_model_config(), seed=3)
        model.eval()
        schedule = make_cosine_schedule(50)
        a = SceneSpec("square", "red", "center", "small")
        b = SceneSpec("square", "blue", "center", "small")
        triples = [(a, "make it blue", b), (a, "keep it", a)]
        res, unseen = edit_accuracy(
            model,
            triples,
            GenerationParams(diffusion_steps=4, cfg_weight=1.0, seed=0),
            schedule,
            vocab,
            train_scenes={a},
        )
        assert len(res.outcomes) == 2
        assert unseen == 1  # b is outside the train scenes
        assert 0.0 <= res.fraction <= 1.0


class TestFlops:
    def test_arithmetic(self):
        assert estimate_flops(1000, 2000) == pytest.approx(1.2e7)

    def test_linear_in_tokens(self):
        assert estimate_flops(10, 200) == 2 * estimate_flops(10, 100)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            estimate_flops(0, 10)
        with pytest.raises(ValueError):
            estimate_flops(10, -1)

    def test_parity_ratio_synthetic_curves(self):
        # curve_a reaches any metric at 4x the flops of curve_b
        curve_b = [(1e6, 10.0), (1e8, 1.0)]
        curve_a = [(4e6, 10.0), (4e8, 1.0)]
        ratio = parity_flop_ratio(curve_a, curve_b, target=3.0)
        assert ratio == pytest.approx(4.0, rel=1e-6)

    def test_parity_ratio_unreachable(self):
        with pytest.raises(ValueError):
            parity_flop_ratio([(1e6, 5.0), (1e7, 4.0)], [(1e6, 5.0), (1e7, 4.0)], 1.0)


class TestHeldoutDdpm:
    def test_deterministic_given_seed(self, vocab):
        from mixgen.corpus import build_corpus

        model = build_model(tiny_model_config(), seed=4)
        rows = build_corpus(CorpusSpec(seed=5, count=4), vocab, k=4)
        schedule = make_cosine_schedule(50)
        a = heldout_ddpm_loss(model, rows, schedule, seed=1)
        b = heldout_ddpm_loss(model, rows, schedule, seed=1)
        c = heldout_ddpm_loss(model, rows, schedule, seed=2)
        assert a == b
        assert a != c


class TestReportIO:
    def test_eval_report_validation(self):
        with pytest.raises(ValueError):
            EvalReport(
                text_ppl=0.5,
                heldout_ddpm_loss=1.0,
                generation_accuracy=0.5,
                edit_accuracy=None,
                flops_estimate=1.0,
                chance_bound=0.01,
                n_gen_prompts=1,
                n_edit_prompts=0,
            )
        with pytest.raises(ValueError):
            EvalReport(
                text_ppl=2.0,
                heldout_ddpm_loss=1.0,
                generation_accuracy=1.5,
                edit_accuracy=None,
                flops_estimate=1.0,
                chance_bound=0.01,
                n_gen_prompts=1,
                n_edit_prompts=0,
            )

    def test_report_json_and_csv(self, tmp_path):
        report = EvalReport(
            text_ppl=2.0,
            heldout_ddpm_loss=0.5,
            generation_accuracy=0.75,
            edit_accuracy=None,
            flops_estimate=6e9,
            chance_bound=1 / 120,
            n_gen_prompts=4,
            n_edit_prompts=0,
            config_hash="abc",
        )
        report.to_json(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["generation_accuracy"] == 0.75
        outcomes = [
            PromptOutcome("small red square left", True, "img/0.ppm"),
            PromptOutcome("large blue circle top", False),
        ]
        outcomes_to_csv(tmp_path / "o.csv", outcomes)
        with open(tmp_path / "o.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["prompt", "pass", "image_path"]
        assert rows[1][1] == "pass" and rows[2][1] == "fail"
