import struct

import pytest
import torch

from mixgen import vocab as V
from mixgen.baseline import (
    Codebook,
    collect_patches,
    fit_codebook,
    dequantize,
    image_token_id,
    load_codebook,
    quantize,
    sample_baseline_image,
    save_codebook,
    to_discrete_row,
)
from mixgen.corpus import CorpusSpec, build_corpus
from mixgen.errors import InsufficientData
from mixgen.model import build_model
from mixgen.sequence import DiscreteToken
from conftest import tiny_model_config


class TestFitCodebook:
    def test_two_cluster_scalar_case(self):
        patches = torch.tensor([[0.0], [0.0], [10.0], [10.0]])
        cb = fit_codebook(patches, k=2, seed=0)
        values = sorted(cb.centroids.view(-1).tolist())
        assert values == [0.0, 10.0]

    def test_k_equals_distinct_gives_zero_error(self):
        patches = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] * 3)
        cb = fit_codebook(patches, k=4, seed=1)
        idx = quantize(patches, cb)
        err = ((dequantize(idx, cb) - patches) ** 2).sum()
        assert err.item() == 0.0

    def test_deterministic_given_seed(self):
        g = torch.Generator().manual_seed(2)
        patches = torch.randn((200, 12), generator=g)
        a = fit_codebook(patches, k=8, seed=5)
        b = fit_codebook(patches, k=8, seed=5)
        assert torch.equal(a.centroids, b.centroids)
        c = fit_codebook(patches, k=8, seed=6)
        assert not torch.equal(a.centroids, c.centroids)

    def test_insufficient_distinct_patches(self):
        patches = torch.zeros(10, 4)
        with pytest.raises(InsufficientData):
            fit_codebook(patches, k=2, seed=0)

    def test_duplicate_heavy_data_keeps_k_centroids(self):
        g = torch.Generator().manual_seed(3)
        base = torch.randn((5, 6), generator=g)
        patches = base.repeat(40, 1)
        cb = fit_codebook(patches, k=5, iters=10, seed=0)
        assert cb.size == 5
        assert torch.isfinite(cb.centroids).all()
        # near-zero quantization error: centroids coincide with the 5 points
        # up to float32 rounding of the cluster means
        idx = quantize(patches, cb)
        assert ((dequantize(idx, cb) - patches) ** 2).sum().item() < 1e-9


class TestQuantize:
    def test_exact_centroid_maps_to_itself(self):
        cb = Codebook(centroids=torch.tensor([[0.0, 0.0], [3.0, 4.0]]))
        assert quantize(torch.tensor([3.0, 4.0]), cb).item() == 1

    def test_tie_breaks_to_lowest_index(self):
        cb = Codebook(centroids=torch.tensor([[1.0], [-1.0], [1.0]]))
        assert quantize(torch.tensor([0.0]), cb).item() == 0

    def test_round_trip_error_is_nearest_distance(self):
        g = torch.Generator().manual_seed(4)
        cb = Codebook(centroids=torch.randn((7, 5), generator=g))
        p = torch.randn((5,), generator=g)
        idx = quantize(p, cb)
        err = ((dequantize(idx, cb) - p) ** 2).sum()
        dists = ((cb.centroids - p) ** 2).sum(-1)
        assert err.item() == pytest.approx(dists.min().item(), rel=1e-6)

    def test_matches_exhaustive_oracle_on_1000_patches(self):
        g = torch.Generator().manual_seed(5)
        cb = Codebook(centroids=torch.randn((16, 12), generator=g))
        patches = torch.randn((1000, 12), generator=g)
        got = quantize(patches, cb)
        for i in range(1000):
            best, best_d = 0, float("inf")
            for j in range(16):
                d = float(((patches[i].double() - cb.centroids[j].double()) ** 2).sum())
                if d < best_d:
                    best, best_d = j, d
            assert got[i].item() == best, i


class TestCodebookFile:
    def test_round_trip_and_header(self, tmp_path):
        g = torch.Generator().manual_seed(6)
        cb = Codebook(centroids=torch.randn((9, 4), generator=g))
        path = tmp_path / "codebook.bin"
        save_codebook(path, cb)
        raw = path.read_bytes()
        k, dim = struct.unpack("<II", raw[:8])
        assert (k, dim) == (9, 4)
        assert len(raw) == 8 + 4 * 9 * 4
        back = load_codebook(path)
        assert torch.equal(back.centroids, cb.centroids)


class TestDiscreteRows:
    @pytest.fixture()
    def setup(self, vocab):
        rows = build_corpus(CorpusSpec(seed=7, count=8), vocab, k=4)
        patches = collect_patches(rows, k=4)
        cb = fit_codebook(patches, k=16, seed=0)
        return rows, cb

    def test_span_length_parity(self, setup, vocab):
        rows, cb = setup
        for row in rows:
            d = to_discrete_row(row, cb, vocab, k=4)
            assert len(d) == len(row)  # same element count per image
            assert not d.images
            ids = [e.id for e in d.elements if isinstance(e, DiscreteToken)]
            assert len(ids) == len(d.elements)
            image_ids = [i for i in ids if i >= vocab.size]
            assert len(image_ids) == sum(n for _, n in row.spans)
            assert all(i < vocab.size + cb.size for i in image_ids)

    def test_boi_eoi_preserved(self, setup, vocab):
        rows, cb = setup
        d = to_discrete_row(rows[0], cb, vocab, k=4)
        start, n = rows[0].spans[0]
        assert d.elements[start - 1].id == V.BOI
        assert d.elements[start + n].id == V.EOI

    def test_sample_baseline_image_structure(self, setup, vocab):
        rows, cb = setup
        cfg = tiny_model_config(vocab_size=vocab.size + cb.size, causal_only=True)
        model = build_model(cfg, seed=8)
        model.eval()
        g = torch.Generator().manual_seed(0)
        img = sample_baseline_image(model, [V.BOS, V.BOI], cb, vocab, g)
        assert img.shape == (3, 16, 16)
        img2 = sample_baseline_image(model, [V.BOS, V.BOI], cb, vocab, g)
        assert torch.equal(img, img2)  # greedy is deterministic

    def test_image_token_id_offsets(self, vocab):
        assert image_token_id(0, vocab) == vocab.size
        assert image_token_id(5, vocab) == vocab.size + 5
