"""Category-specific vector-quantised shape-prior retriever.

A visible mask (resized to the prior resolution) is encoded to a ``k x k``
grid of ``v``-dim latents, each latent is snapped to the codeword with the
highest cosine similarity in its category's codebook, and the selected
codewords are decoded to a soft amodal shape prior.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .errors import NonFiniteLoss, ShapeError, UnknownCategory
from .masks import MASK_THRESHOLD, resize_mask


@dataclass
class RetrieverConfig:
    num_categories: int = 4
    category_specific: bool = True
    codebook_size: int = 64  # K
    code_dim: int = 16  # v
    grid: int = 4  # k
    resolution: int = 32
    width: int = 32
    commitment: float = 0.0

    @property
    def num_codebooks(self) -> int:
        return self.num_categories if self.category_specific else 1

    def validate(self) -> None:
        levels = math.log2(self.resolution / self.grid)
        if levels != int(levels) or levels < 1:
            raise ValueError("resolution / grid must be a power of two >= 2")


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU())


def _up(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 2, stride=2), nn.ReLU(),
                         nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU())


def quantize(latents: Tensor, codebook: Tensor) -> tuple[Tensor, Tensor]:
    """Nearest codeword by cosine similarity.

    ``latents`` ``[..., m, v]``, ``codebook`` ``[K, v]`` (or ``[..., K, v]`` per
    sample).  Returns the selected codeword values and their indices; ties go
    to the lowest index and a zero latent picks index 0.
    """
    if latents.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f"latent dim {latents.shape[-1]} != codeword dim {codebook.shape[-1]}")
    sim = F.normalize(latents, dim=-1) @ F.normalize(codebook, dim=-1).transpose(-1, -2)
    idx = torch.argmax(sim, dim=-1)
    if codebook.dim() == 2:
        chosen = codebook[idx]
    else:
        chosen = torch.gather(codebook, -2, idx[..., None].expand(*idx.shape, codebook.shape[-1]))
    return chosen, idx


@dataclass
class ShapePrior:
    soft: np.ndarray
    binary: np.ndarray

    @classmethod
    def from_soft(cls, soft) -> "ShapePrior":
        soft = np.asarray(soft, dtype=np.float64)
        return cls(soft, soft >= MASK_THRESHOLD)


@dataclass
class PriorLosses:
    rec: Tensor
    vq: Tensor
    indices: Tensor

    @property
    def total(self) -> Tensor:
        return self.rec + self.vq


class ShapePriorRetriever(nn.Module):
    def __init__(self, cfg: RetrieverConfig | None = None):
        super().__init__()
        cfg = cfg or RetrieverConfig()
        cfg.validate()
        self.cfg = cfg
        w = cfg.width
        levels = int(math.log2(cfg.resolution // cfg.grid))
        self.stem = nn.Sequential(nn.Conv2d(1, w, 3, padding=1), nn.ReLU())
        self.down = nn.Sequential(*[_down(w, w) for _ in range(levels)])
        self.to_latent = nn.Conv2d(w, cfg.code_dim, 1)
        self.from_latent = nn.Sequential(nn.Conv2d(cfg.code_dim, w, 1), nn.ReLU())
        self.up = nn.Sequential(*[_up(w, w) for _ in range(levels)])
        self.head = nn.Conv2d(w, 1, 3, padding=1)
        books = torch.randn(cfg.num_codebooks, cfg.codebook_size, cfg.code_dim)
        self.codebooks = nn.Parameter(F.normalize(books, dim=-1))

    # -- pieces ------------------------------------------------------------------

    def encode(self, masks: Tensor) -> Tensor:
        """``[N, 1, R, R]`` masks -> ``[N, k, k, v]`` latent grid."""
        r = self.cfg.resolution
        if masks.dim() != 4 or masks.shape[1:] != (1, r, r):
            raise ShapeError(f"expected [N,1,{r},{r}] masks, got {tuple(masks.shape)}")
        e = self.to_latent(self.down(self.stem(masks)))
        return e.permute(0, 2, 3, 1)

    def decode_logits(self, grid: Tensor) -> Tensor:
        """``[N, k, k, v]`` codeword grid -> ``[N, R, R]`` prior logits."""
        k = self.cfg.grid
        if grid.dim() != 4 or grid.shape[1:] != (k, k, self.cfg.code_dim):
            raise ShapeError(f"expected [N,{k},{k},{self.cfg.code_dim}], got {tuple(grid.shape)}")
        x = self.from_latent(grid.permute(0, 3, 1, 2))
        return self.head(self.up(x))[:, 0]

    def decode(self, grid: Tensor) -> Tensor:
        return torch.sigmoid(self.decode_logits(grid))

    def book_index(self, categories: Tensor) -> Tensor:
        categories = torch.as_tensor(categories, dtype=torch.long)
        if categories.numel() and (categories.min() < 0 or categories.max() >= self.cfg.num_categories):
            raise UnknownCategory(f"category outside [0, {self.cfg.num_categories})")
        if not self.cfg.category_specific:
            return torch.zeros_like(categories)
        return categories

    def books_for(self, categories: Tensor) -> Tensor:
        """Unit-norm codebook of each sample, ``[N, K, v]``."""
        return F.normalize(self.codebooks[self.book_index(categories)], dim=-1)

    def latents(self, masks: Tensor) -> Tensor:
        """Unit-norm encoder outputs flattened to ``[N, k*k, v]``."""
        e = self.encode(masks)
        return F.normalize(e.reshape(e.shape[0], self.cfg.grid ** 2, -1), dim=-1)

    def quantize_batch(self, latents: Tensor, categories: Tensor) -> tuple[Tensor, Tensor]:
        """``[N, m, v]`` latents against each sample's codebook."""
        return quantize(latents, self.books_for(categories))

    # -- inference ---------------------------------------------------------------

    def prior_batch(self, masks: Tensor, categories: Tensor) -> Tensor:
        """Soft priors ``[N, R, R]`` for visible masks at prior resolution."""
        flat = self.latents(masks)
        k = self.cfg.grid
        chosen, _ = self.quantize_batch(flat, categories)
        return self.decode(chosen.reshape(-1, k, k, self.cfg.code_dim))

    @torch.no_grad()
    def retrieve(self, visible: np.ndarray, category: int) -> ShapePrior:
        """Shape prior for one binary visible mask (any size) and category."""
        if not 0 <= int(category) < self.cfg.num_categories:
            raise UnknownCategory(f"category {category} outside [0, {self.cfg.num_categories})")
        r = self.cfg.resolution
        m = resize_mask(visible, r, r).astype(np.float32)
        dtype = self.codebooks.dtype
        x = torch.from_numpy(m)[None, None].to(dtype)
        soft = self.prior_batch(x, torch.tensor([int(category)]))[0]
        return ShapePrior.from_soft(soft.cpu().numpy())

    # -- training ----------------------------------------------------------------

    def losses(self, inputs: Tensor, targets: Tensor, categories: Tensor,
               frozen: Optional[dict] = None) -> PriorLosses:
        """Reconstruction and codebook losses with a straight-through quantiser.

        Latents and codewords are unit-normalised first, so both losses stay
        bounded and selection is unchanged from plain cosine similarity.

        The decoder reads ``e' + sg(b' - e')`` so its gradient passes to the
        encoder unchanged; the codebook loss ``MSE(sg(e'), b')`` moves codewords
        toward the encoder outputs and ``commitment * MSE(e', sg(b'))`` is added
        when that coefficient is nonzero.  ``frozen`` pins the stop-gradient
        values and selected indices (see :meth:`frozen_state`), turning the
        objective into a smooth function of the parameters for gradient checks.
        """
        flat = self.latents(inputs)
        n, k = flat.shape[0], self.cfg.grid
        books = self.books_for(categories)
        if frozen is None:
            _, idx = quantize(flat.detach(), books.detach())
        else:
            idx = frozen["indices"]
        chosen = torch.gather(books, 1, idx[..., None].expand(*idx.shape, books.shape[-1]))
        e_sg = flat.detach() if frozen is None else frozen["latents"]
        b_sg = chosen.detach() if frozen is None else frozen["codewords"]
        z_q = flat - e_sg + b_sg
        prior = self.decode(z_q.reshape(n, k, k, -1))
        rec = F.mse_loss(prior, targets.reshape(prior.shape))
        vq = F.mse_loss(chosen, e_sg)
        if self.cfg.commitment:
            vq = vq + self.cfg.commitment * F.mse_loss(flat, b_sg)
        if not (torch.isfinite(rec) and torch.isfinite(vq)):
            raise NonFiniteLoss(f"retriever loss not finite: rec={rec.item()} vq={vq.item()}")
        return PriorLosses(rec, vq, idx)

    @torch.no_grad()
    def frozen_state(self, inputs: Tensor, categories: Tensor) -> dict:
        flat = self.latents(inputs)
        chosen, idx = self.quantize_batch(flat, categories)
        return {"latents": flat.clone(), "codewords": chosen.clone(), "indices": idx.clone()}

    @torch.no_grad()
    def reseed_dead_codes(self, usage: Tensor, latents: Tensor, book_of_latent: Tensor,
                          generator: torch.Generator) -> int:
        """Replace codewords never selected in ``usage`` by random encoder outputs
        from the same codebook's samples (any sample when that book saw none)."""
        replaced = 0
        for b in range(self.cfg.num_codebooks):
            dead = torch.nonzero(usage[b] == 0).flatten()
            if dead.numel() == 0:
                continue
            pool = latents[book_of_latent == b]
            if pool.shape[0] == 0:
                pool = latents
            if pool.shape[0] == 0:
                continue
            pick = torch.randint(pool.shape[0], (dead.numel(),), generator=generator)
            fresh = pool[pick]
            zero = fresh.norm(dim=-1) == 0
            if zero.any():
                fresh[zero] = F.normalize(torch.randn(int(zero.sum()), fresh.shape[-1], generator=generator,
                                                      dtype=fresh.dtype), dim=-1)
            self.codebooks.data[b, dead] = fresh
            replaced += dead.numel()
        return replaced

    def config_dict(self) -> dict:
        return asdict(self.cfg)
