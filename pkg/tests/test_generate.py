import math

import pytest
import torch

from mixgen import vocab as V
from mixgen.errors import PrefixNotAtBOI
from mixgen.generate import (
    GenerationParams,
    GenerationResult,
    SequenceBuilder,
    diffuse_image,
    generate,
    sample_token,
)
from mixgen.model import ForwardOutput, ModelConfig, build_model
from mixgen.schedule import cfg_combine, ddpm_step, make_cosine_schedule, strided_timesteps
from mixgen.sequence import DiscreteToken, ImageRef, MixedSequence
from mixgen.vocab import tokenize
from conftest import tiny_model_config


class StubModel:
    """Duck-typed stand-in: fixed logits plus zero noise predictions."""

    def __init__(self, cfg: ModelConfig, favored_token: int):
        self.cfg = cfg
        self.favored = favored_token
        self.calls = []

    def __call__(self, batch, draws, allow):
        b, length = batch.size
        self.calls.append(
            {"length": length, "n_images": len(batch.images), "n_draws": len(draws)}
        )
        logits = torch.zeros(b, length, self.cfg.vocab_size)
        logits[:, :, self.favored] = 5.0
        eps = [torch.zeros_like(d.x_t) for d in draws]
        return ForwardOutput(logits=logits, eps_hat=eps)


def prompt_of(vocab, text="hi"):
    elements = [DiscreteToken(V.BOS)] + [DiscreteToken(t) for t in tokenize(text, vocab)]
    return MixedSequence(elements=tuple(elements))


def boi_prompt(vocab, text="hi"):
    seq = prompt_of(vocab, text)
    return MixedSequence(elements=seq.elements + (DiscreteToken(V.BOI),))


@pytest.fixture()
def schedule():
    return make_cosine_schedule(100)


class TestGenerate:
    def test_eos_emitter_appends_only_eos(self, vocab, schedule):
        model = StubModel(tiny_model_config(), favored_token=V.EOS)
        prompt = prompt_of(vocab)
        res = generate(model, prompt, GenerationParams(max_new_elements=10, diffusion_steps=4, seed=0), schedule)
        assert res.stop_reason == "eos"
        assert res.sequence.elements == prompt.elements + (DiscreteToken(V.EOS),)

    def test_prompt_preserved_verbatim(self, vocab, schedule):
        model = StubModel(tiny_model_config(), favored_token=V.EOS)
        prompt = prompt_of(vocab, "keep me")
        res = generate(model, prompt, GenerationParams(max_new_elements=4, diffusion_steps=4, seed=0), schedule)
        assert res.sequence.elements[: len(prompt)] == prompt.elements

    def test_boi_emitter_builds_well_formed_image(self, vocab, schedule):
        cfg = tiny_model_config()
        n = cfg.patch_config.n_patches

        class BoiOnce(StubModel):
            def __call__(self, batch, draws, allow):
                out = super().__call__(batch, draws, allow)
                favored = V.EOS if batch.images else V.BOI
                out.logits.fill_(0)
                out.logits[:, :, favored] = 5.0
                return out

        model = BoiOnce(cfg, favored_token=V.BOI)
        prompt = prompt_of(vocab)
        params = GenerationParams(max_new_elements=n + 8, diffusion_steps=3, seed=0)
        res = generate(model, prompt, params, schedule)
        els = res.sequence.elements
        boi_at = next(i for i, e in enumerate(els) if isinstance(e, DiscreteToken) and e.id == V.BOI)
        span = els[boi_at + 1 : boi_at + 1 + n]
        assert all(isinstance(e, ImageRef) for e in span)
        eoi = els[boi_at + 1 + n]
        assert isinstance(eoi, DiscreteToken) and eoi.id == V.EOI
        assert len(res.sequence.images) == 1
        assert res.stop_reason == "eos"

    def test_budget_stops_and_flags(self, vocab, schedule):
        model = StubModel(tiny_model_config(), favored_token=10)  # never EOS
        res = generate(model, prompt_of(vocab), GenerationParams(max_new_elements=5, diffusion_steps=4, seed=0), schedule)
        assert res.stop_reason == "budget"
        assert res.new_elements == 5

    def test_image_that_cannot_fit_is_not_started(self, vocab, schedule):
        cfg = tiny_model_config()
        model = StubModel(cfg, favored_token=V.BOI)
        params = GenerationParams(max_new_elements=3, diffusion_steps=2, seed=0)
        res = generate(model, prompt_of(vocab), params, schedule)
        assert res.stop_reason == "budget"
        assert len(res.sequence.images) == 0

    def test_deterministic_at_temperature_zero(self, vocab, schedule):
        model = build_model(tiny_model_config(), seed=3)
        model.eval()
        prompt = prompt_of(vocab, "aa")
        params = GenerationParams(
            max_new_elements=24, temperature=0.0, diffusion_steps=4, cfg_weight=1.0, seed=9
        )
        r1 = generate(model, prompt, params, schedule)
        r2 = generate(model, prompt, params, schedule)
        assert r1.sequence.elements == r2.sequence.elements
        assert all(torch.equal(a, b) for a, b in zip(r1.sequence.images, r2.sequence.images))


class TestDiffuseImage:
    def test_requires_boi_suffix(self, vocab, schedule):
        model = StubModel(tiny_model_config(), favored_token=V.EOS)
        with pytest.raises(PrefixNotAtBOI):
            diffuse_image(model, prompt_of(vocab), GenerationParams(seed=0), schedule)

    def test_single_step_forward_counts(self, vocab, schedule):
        cfg = tiny_model_config()
        prompt = boi_prompt(vocab)
        for w, expected in ((1.0, 1), (3.0, 2)):
            model = StubModel(cfg, favored_token=V.EOS)
            params = GenerationParams(diffusion_steps=1, cfg_weight=w, seed=0)
            diffuse_image(model, prompt, params, schedule)
            assert len(model.calls) == expected

    def test_image_overwritten_never_appended(self, vocab, schedule):
        cfg = tiny_model_config()
        model = StubModel(cfg, favored_token=V.EOS)
        params = GenerationParams(diffusion_steps=6, cfg_weight=1.0, seed=0)
        diffuse_image(model, boi_prompt(vocab), params, schedule)
        lengths = {c["length"] for c in model.calls}
        n_images = {c["n_images"] for c in model.calls}
        assert len(lengths) == 1  # sequence never grows during denoising
        assert n_images == {1}

    def test_output_finite_and_in_range(self, vocab, schedule):
        model = build_model(tiny_model_config(), seed=5)
        model.eval()
        params = GenerationParams(diffusion_steps=8, cfg_weight=3.0, seed=2)
        img = diffuse_image(model, boi_prompt(vocab), params, schedule)
        assert torch.isfinite(img).all()
        assert img.min() >= -1.0 and img.max() <= 1.0

    def test_w1_matches_manual_reference_loop(self, vocab, schedule):
        """Independent reimplementation of the denoising loop; with w=1 the
        conditional-only fast path must match it exactly."""
        model = build_model(tiny_model_config(), seed=6)
        model.eval()
        params = GenerationParams(diffusion_steps=5, cfg_weight=1.0, seed=4)
        prompt = boi_prompt(vocab, "ref")
        got = diffuse_image(model, prompt, params, schedule)

        from mixgen.generate import SequenceBuilder, _forward_builder

        rng = torch.Generator().manual_seed(params.seed)
        builder = SequenceBuilder.from_sequence(prompt)
        pc = model.cfg.patch_config
        x = torch.randn((pc.channels, pc.height, pc.width), generator=rng)
        builder.open_image(x, pc.n_patches)
        ts = strided_timesteps(schedule.timesteps, params.diffusion_steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_c = _forward_builder(model, builder, active=(x, t)).eps_hat[-1]
            eps_u = _forward_builder(model, builder, active=(x, t)).eps_hat[-1]
            eps = cfg_combine(eps_c, eps_u, 1.0)
            x = ddpm_step(x, eps, t, t_prev, schedule, rng, last_step=(t_prev == 0))
            builder.set_last_image(x)
        assert torch.equal(got, x)

    def test_steps_cannot_exceed_timesteps(self, vocab, schedule):
        model = StubModel(tiny_model_config(), favored_token=V.EOS)
        with pytest.raises(ValueError):
            diffuse_image(
                model, boi_prompt(vocab), GenerationParams(diffusion_steps=101, seed=0), schedule
            )


class TestSampleToken:
    def test_greedy_picks_argmax(self):
        logits = torch.zeros(10)
        logits[7] = 3.0
        g = torch.Generator().manual_seed(0)
        assert sample_token(logits, 0.0, 1.0, g) == 7

    def test_pad_and_bos_never_sampled(self):
        logits = torch.zeros(10)
        logits[V.PAD] = 100.0
        logits[V.BOS] = 90.0
        g = torch.Generator().manual_seed(0)
        for temp in (0.0, 1.0):
            for _ in range(20):
                assert sample_token(logits, temp, 1.0, g) not in (V.PAD, V.BOS)

    def test_top_p_restricts_support(self):
        logits = torch.tensor([-100.0, -100.0, 3.0, 2.0, -5.0, -5.0])
        g = torch.Generator().manual_seed(1)
        seen = {sample_token(logits, 1.0, 0.9, g) for _ in range(200)}
        assert seen <= {2, 3}

    def test_params_validation(self):
        with pytest.raises(ValueError):
            GenerationParams(top_p=0.0)
        with pytest.raises(ValueError):
            GenerationParams(temperature=-1.0)
        with pytest.raises(ValueError):
            GenerationParams(max_new_elements=0)


def test_builder_round_trip(vocab):
    seq = boi_prompt(vocab, "abc")
    b = SequenceBuilder.from_sequence(seq)
    assert b.sequence().elements == seq.elements
    assert b.text_seen
