import numpy as np
import pytest
import torch

from shapeformer.errors import ShapeError, UnknownCategory
from shapeformer.masks import mask_iou, resize_mask
from shapeformer.nn import grad_check, param_hash
from shapeformer.prior import (evaluate_prior, load_retriever, prior_samples, save_retriever,
                               train_prior_step)
from shapeformer.retriever import RetrieverConfig, ShapePriorRetriever, quantize
from shapeformer.synth import render_family

D = torch.float64
SMALL = RetrieverConfig(num_categories=2, codebook_size=8, code_dim=4, grid=2, resolution=8, width=4)


def small(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = RetrieverConfig(**{**SMALL.__dict__, **kw})
    return ShapePriorRetriever(cfg).double()


def brute_cosine_argmax(latents, book):
    out = []
    for e in latents:
        best, best_sim = 0, -np.inf
        for j, b in enumerate(book):
            ne, nb = np.sqrt((e * e).sum()), np.sqrt((b * b).sum())
            sim = 0.0 if ne == 0 else float((e * b).sum() / (ne * nb))
            if sim > best_sim:
                best, best_sim = j, sim
        out.append(best)
    return out


class TestQuantize:
    def test_example(self):
        _, idx = quantize(torch.tensor([[0.9, 0.1]]), torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        assert idx.tolist() == [0]

    def test_scaled_codeword(self):
        book = torch.tensor([[1.0, 2.0], [-1.0, 0.5], [0.3, -0.2]])
        chosen, idx = quantize(7.5 * book[1:2], book)
        assert idx.item() == 1
        assert torch.equal(chosen[0], book[1])

    def test_tie_lowest_index(self):
        _, idx = quantize(torch.tensor([[1.0, 1.0]]), torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        assert idx.item() == 0

    def test_brute_force_1000(self):
        g = torch.Generator().manual_seed(0)
        book = torch.randn(64, 16, generator=g, dtype=D)
        lat = torch.randn(1000, 16, generator=g, dtype=D)
        chosen, idx = quantize(lat, book)
        assert idx.tolist() == brute_cosine_argmax(lat.numpy(), book.numpy())
        assert torch.equal(chosen, book[idx])

    def test_positive_rescale_invariance(self):
        g = torch.Generator().manual_seed(1)
        book = torch.randn(8, 4, generator=g)
        lat = torch.randn(50, 4, generator=g)
        scale = torch.rand(50, 1, generator=g) * 10 + 0.01
        assert torch.equal(quantize(lat, book)[1], quantize(lat * scale, book)[1])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            quantize(torch.zeros(1, 3), torch.zeros(2, 4))


class TestRetriever:
    def test_default_shapes(self):
        r = ShapePriorRetriever()
        e = r.encode(torch.zeros(2, 1, 32, 32))
        assert e.shape == (2, 4, 4, 16)
        out = r.decode(torch.randn(2, 4, 4, 16))
        assert out.shape == (2, 32, 32)
        assert ((out > 0) & (out < 1)).all()

    def test_zero_mask_zero_bias_gives_zero_latent(self):
        r = ShapePriorRetriever()
        with torch.no_grad():
            for name, p in r.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
        assert not r.encode(torch.zeros(1, 1, 32, 32)).any()

    def test_selected_rows_are_codewords(self):
        r = small()
        x = (torch.rand(6, 1, 8, 8, dtype=D) > 0.5).to(D)
        cats = torch.tensor([0, 1, 0, 1, 1, 0])
        chosen, idx = r.quantize_batch(r.latents(x), cats)
        books = r.books_for(cats)
        for n in range(6):
            for m in range(idx.shape[1]):
                assert torch.equal(chosen[n, m], books[n, idx[n, m]])

    def test_retrieve_deterministic_and_unknown(self):
        r = small().float().eval()
        m = render_family("rectangle", (2, 2, 12, 9), (16, 16))
        a, b = r.retrieve(m, 1), r.retrieve(m, 1)
        np.testing.assert_array_equal(a.soft, b.soft)
        assert a.soft.shape == (8, 8)
        with pytest.raises(UnknownCategory):
            r.retrieve(m, 2)
        with pytest.raises(UnknownCategory):
            r.retrieve(m, -1)

    def test_shared_codebook_mode(self):
        r = small(category_specific=False)
        assert r.codebooks.shape[0] == 1
        assert r.book_index(torch.tensor([0, 1])).tolist() == [0, 0]

    def test_codewords_nonzero_after_reseed(self):
        r = small()
        usage = torch.zeros(2, 8, dtype=torch.long)
        usage[0, :4] = 1
        lat = torch.zeros(5, 4, dtype=D)
        n = r.reseed_dead_codes(usage, lat, torch.zeros(5, dtype=torch.long), torch.Generator().manual_seed(0))
        assert n == 12
        assert (r.codebooks.norm(dim=-1) > 0).all()


class TestLosses:
    def test_half_prior_rec_quarter(self):
        r = small()
        with torch.no_grad():
            r.head.weight.zero_()
            r.head.bias.zero_()
        x = (torch.rand(4, 1, 8, 8, dtype=D) > 0.5).to(D)
        targets = (torch.rand(4, 8, 8, dtype=D) > 0.5).to(D)
        losses = r.losses(x, targets, torch.tensor([0, 1, 1, 0]))
        assert losses.rec.item() == 0.25

    def test_perfect_reconstruction_is_zero(self):
        r = small()
        x = (torch.rand(1, 1, 8, 8, dtype=D) > 0.5).to(D)
        with torch.no_grad():
            lat = r.latents(x)[0]
            r.codebooks[0, :lat.shape[0]] = lat
            frozen = r.frozen_state(x, torch.tensor([0]))
            k = r.cfg.grid
            target = r.decode(frozen["codewords"].reshape(1, k, k, -1))
        losses = r.losses(x, target, torch.tensor([0]))
        assert losses.vq.item() < 1e-28
        assert losses.total.item() < 1e-28

    def test_train_prior_step_grad_check(self):
        r = small(seed=3)
        x = (torch.rand(3, 1, 8, 8, dtype=D) > 0.5).to(D)
        y = (torch.rand(3, 8, 8, dtype=D) > 0.5).to(D)
        cats = torch.tensor([0, 1, 1])
        frozen = r.frozen_state(x, cats)
        res = grad_check(lambda: r.losses(x, y, cats, frozen).total, dict(r.named_parameters()),
                         max_per_param=6)
        assert res.passed, res.worst

    def test_straight_through_reaches_encoder(self):
        r = small()
        x = (torch.rand(2, 1, 8, 8, dtype=D) > 0.5).to(D)
        y = (torch.rand(2, 8, 8, dtype=D) > 0.5).to(D)
        r.losses(x, y, torch.tensor([0, 1])).rec.backward()
        assert r.stem[0].weight.grad.abs().sum() > 0
        assert r.codebooks.grad is None or r.codebooks.grad.abs().sum() == 0

    def test_toy_training_decreases(self):
        torch.manual_seed(0)
        cfg = RetrieverConfig(num_categories=2, codebook_size=16, code_dim=8, grid=4, resolution=16, width=8)
        r = ShapePriorRetriever(cfg)
        rng = np.random.default_rng(0)
        amodal, cats = [], []
        for i in range(64):
            c = i % 2
            if c == 0:
                x0, y0 = rng.integers(0, 6, 2)
                m = render_family("rectangle", (x0, y0, x0 + 9, y0 + 7), (16, 16))
            else:
                cx, cy = rng.uniform(6, 10, 2)
                m = render_family("ellipse", (cx, cy, 5.0, 4.0, 0.0), (16, 16))
            amodal.append(m)
            cats.append(c)
        targets = torch.from_numpy(np.stack(amodal).astype(np.float32))
        visible = targets.clone()
        visible[:, :, :5] = 0
        cats = torch.tensor(cats)
        opt = torch.optim.Adam(r.parameters(), lr=3e-3)
        totals = []
        for step in range(200):
            idx = torch.from_numpy(rng.choice(64, 16, replace=False))
            rec, vq, _ = train_prior_step(r, opt, visible[idx][:, None], targets[idx], cats[idx])
            totals.append(rec + vq)
        blocks = np.asarray(totals).reshape(4, 50).mean(axis=1)
        assert np.all(np.diff(blocks) < 0), blocks


def test_checkpoint_round_trip(tmp_path):
    r = small().float()
    save_retriever(r, tmp_path / "r.ckpt")
    back = load_retriever(tmp_path / "r.ckpt")
    assert param_hash(back) == param_hash(r)
    assert not any(p.requires_grad for p in back.parameters())


@pytest.mark.slow
def test_trained_prior_completes_half_occluded_rectangle():
    from shared import benchmark, trained_retriever
    retriever, _ = trained_retriever(0, True, True)
    train, test = benchmark(0)
    # the rectangle family is category 0 by default
    checked = 0
    for rec in test:
        for inst in rec.instances:
            if inst.category != 0:
                continue
            amodal = inst.quartet.amodal[inst.box.y0:inst.box.y1, inst.box.x0:inst.box.x1]
            visible = amodal.copy()
            visible[:, visible.shape[1] // 2:] = False
            if not visible.any():
                continue
            prior = retriever.retrieve(visible, 0)
            target = resize_mask(amodal, 32, 32)
            assert mask_iou(prior.binary, target) >= mask_iou(resize_mask(visible, 32, 32), target)
            checked += 1
            if checked == 10:
                return
    assert checked > 0


@pytest.mark.slow
def test_prior_samples_and_eval_report():
    from shared import benchmark, trained_retriever
    retriever, _ = trained_retriever(0, True, True)
    _, test = benchmark(0)
    s = prior_samples(test[:5], 32)
    assert s.amodal.shape[1:] == (32, 32)
    rep = evaluate_prior(retriever, test)
    assert 0 <= rep["prior_iou"] <= 1 and rep["count"] == sum(len(r.instances) for r in test)
