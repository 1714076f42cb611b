"""Patch-token models.

Two families: Hugging Face vision transformers (``hf:<repo>``, requires
torch/transformers and locally available weights) and the self-contained
deterministic ``gradproj-<dim>`` projector for offline use and testing.
All models consume a 3-channel float image in [0, 1] (grayscale tiles are
replicated across channels) and emit one feature row per patch of a regular
grid, row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ModelLoadError(RuntimeError):
    pass


@dataclass
class GradProjModel:
    """Deterministic stand-in encoder: a fixed random projection of each
    patch's pixels and Sobel gradients.  Weights derive from the model name,
    so identical inputs always produce identical tokens."""

    name: str
    dim: int
    patch_px: int = 16

    def __post_init__(self):
        seed = np.frombuffer(self.name.encode(), dtype=np.uint8).sum()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), self.dim,
                                                            self.patch_px]))
        n_in = 3 * self.patch_px * self.patch_px
        self.weights = rng.normal(0.0, 1.0 / np.sqrt(n_in),
                                  size=(self.dim, n_in))

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(3, H, W) image -> (n_patches, dim); H and W divide patch_px."""
        _, h, w = image.shape
        p = self.patch_px
        gray = image.mean(axis=0)
        gx = np.zeros_like(gray)
        gy = np.zeros_like(gray)
        gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
        gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
        stack = np.stack([gray, gx, gy])
        n_r, n_c = h // p, w // p
        patches = (stack.reshape(3, n_r, p, n_c, p)
                   .transpose(1, 3, 0, 2, 4).reshape(n_r * n_c, 3 * p * p))
        return patches @ self.weights.T


class HfVitModel:
    """Patch tokens from a Hugging Face vision transformer (CPU by default).

    Weights must be available locally; a failed load raises ModelLoadError
    with the underlying reason.
    """

    def __init__(self, repo: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise ModelLoadError(f"torch/transformers unavailable: {exc}") from exc
        try:
            self._torch = torch
            self.processor = AutoImageProcessor.from_pretrained(repo)
            self.model = AutoModel.from_pretrained(repo).to(device).eval()
        except Exception as exc:
            raise ModelLoadError(f"cannot load model {repo!r}: {exc}") from exc
        self.name = repo
        self.device = device
        cfg = self.model.config
        self.patch_px = int(getattr(cfg, "patch_size", 14))
        self.dim = int(getattr(cfg, "hidden_size", 768))
        self._n_special = 1 + int(getattr(cfg, "num_register_tokens", 0))

    def encode(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        _, h, w = image.shape
        pixel_values = torch.from_numpy(image[None].astype(np.float32))
        mean = torch.tensor(self.processor.image_mean).view(1, 3, 1, 1)
        std = torch.tensor(self.processor.image_std).view(1, 3, 1, 1)
        pixel_values = (pixel_values - mean) / std
        with torch.no_grad():
            out = self.model(pixel_values=pixel_values.to(self.device))
        tokens = out.last_hidden_state[0, self._n_special:]
        expected = (h // self.patch_px) * (w // self.patch_px)
        if tokens.shape[0] != expected:
            raise ModelLoadError(
                f"{self.name}: got {tokens.shape[0]} tokens for a "
                f"{h}x{w} input, expected {expected}")
        return tokens.cpu().numpy().astype(np.float64)


def load_model(name: str, device: str = "cpu", patch_px: int | None = None):
    """``gradproj-<dim>`` (offline, deterministic) or ``hf:<repo>``.

    Raises:
        ModelLoadError: unknown name or a foundation model that cannot load.
    """
    if name.startswith("gradproj-"):
        try:
            dim = int(name.split("-", 1)[1])
        except ValueError as exc:
            raise ModelLoadError(f"bad gradproj spec {name!r}") from exc
        if dim < 8:
            raise ModelLoadError("gradproj dimension must be >= 8")
        return GradProjModel(name, dim, patch_px or 16)
    if name.startswith("hf:"):
        return HfVitModel(name[3:], device=device)
    raise ModelLoadError(
        f"unknown model {name!r}; use gradproj-<dim> or hf:<repo>")
