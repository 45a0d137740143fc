"""
Toy latent-diffusion editor.

The latent is the fine-scale token grid of the image encoder, [n_grid, d_enc].
The denoiser sees [z_t, source latent] concatenated along channels plus the
learned injections of the visual and textual enhanced features, attends to the
context [ē_vis; ē_txt], and predicts the added noise.
"""
import logging
import math
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .edit_models import GuidanceBundle
from .errors import NonFiniteLossError, ShapeError
from .layers import Linear, Module, ModuleList, TransformerLayer, parameter, xavier_uniform
from .tensor import Tensor, add, concat, constant, matmul, mean_all, reshape, square, sub

logger = logging.getLogger(__name__)


class NoiseSchedule:
    """β_t for t = 1..T with α_t = 1 − β_t and ᾱ_t = Π_{s≤t} α_s."""

    def __init__(self, betas: Sequence[float]):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a nonempty 1-D sequence")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("every beta must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear(cls, t_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, t_steps))

    @property
    def t_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha_bars[t - 1])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.t_steps:
            raise ValueError(f"timestep {t} outside [1, {self.t_steps}]")


def forward_noising(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε."""
    if np.shape(eps) != np.shape(z0):
        raise ShapeError(f"noise shape {np.shape(eps)} differs from latent shape {np.shape(z0)}")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * np.asarray(z0) + math.sqrt(1.0 - a) * np.asarray(eps)


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    return np.pad(emb, (0, dim - emb.size))


class LatentInjector(Module):
    """Token-mixing matrix M [n_grid, n_ctx] and a zero-initialised channel map d_diff → 2·d_enc."""

    def __init__(self, n_grid: int, n_ctx: int, d_diff: int, d_enc: int, rng: np.random.Generator):
        super().__init__()
        self.n_ctx = n_ctx
        self.mixing = parameter(xavier_uniform(rng, n_grid, n_ctx))
        self.channels = Linear(d_diff, 2 * d_enc, rng, bias=False, zero_init=True)

    def __call__(self, r_bar: Tensor) -> Tensor:
        if r_bar.shape[0] != self.n_ctx:
            raise ShapeError(f"injector expects {self.n_ctx} feature rows, got {r_bar.shape}")
        return self.channels(matmul(self.mixing, r_bar))


def condition_inputs(z_t: Tensor, img_lat: Tensor, r_bar_vis: Optional[Tensor], r_bar_txt: Optional[Tensor],
                     injector_vis: "LatentInjector", injector_txt: "LatentInjector") -> Tensor:
    """[z_t, E_I(I)] + inject(R̄_vis) + inject(R̄_txt); a missing feature contributes nothing."""
    if z_t.shape[0] != img_lat.shape[0]:
        raise ShapeError(f"latent grids differ: z_t {z_t.shape} vs source latent {img_lat.shape}")
    out = concat([z_t, img_lat], axis=1)
    if r_bar_vis is not None:
        out = add(out, injector_vis(r_bar_vis))
    if r_bar_txt is not None:
        out = add(out, injector_txt(r_bar_txt))
    return out


class Denoiser(Module):
    """ε_δ: input projection, timestep embedding, (self-attn, cross-attn, FF) blocks, head to d_enc."""

    def __init__(self, d_enc: int, d_diff: int, heads: int, rng: np.random.Generator, n_blocks: int = 2,
                 ln_eps: float = 1e-5):
        super().__init__()
        self.d_diff = d_diff
        self.in_proj = Linear(2 * d_enc, d_diff, rng)
        self.time_proj = Linear(d_diff, d_diff, rng)
        self.blocks = ModuleList([
            TransformerLayer(d_diff, heads, rng, cross=True, ln_eps=ln_eps, label=f"denoiser.block{i}")
            for i in range(n_blocks)
        ])
        self.head = Linear(d_diff, d_enc, rng)


def denoise(t: int, conditioned: Tensor, context: Tensor, model: Denoiser) -> Tensor:
    """Predicted noise with the shape of z_t."""
    x = model.in_proj(conditioned)
    t_emb = model.time_proj(constant(timestep_embedding(t, model.d_diff)[None, :]))
    x = add(x, reshape(t_emb, (model.d_diff,)))
    for block in model.blocks:
        x = block(x, context=context)
    return model.head(x)


class LatentEditor(Module):
    """Injectors plus denoiser; ``denoise`` is the single prediction entry point."""

    def __init__(self, n_grid: int, n_ctx_vis: int, n_ctx_txt: int, d_enc: int, d_diff: int, heads: int,
                 rng_injection: np.random.Generator, rng_denoiser: np.random.Generator, ln_eps: float = 1e-5):
        super().__init__()
        self.d_enc = d_enc
        self.injector_vis = LatentInjector(n_grid, n_ctx_vis, d_diff, d_enc, rng_injection)
        self.injector_txt = LatentInjector(n_grid, n_ctx_txt, d_diff, d_enc, rng_injection)
        self.denoiser = Denoiser(d_enc, d_diff, heads, rng_denoiser, ln_eps=ln_eps)

    def condition(self, z_t: Tensor, img_lat: Tensor, bundle: GuidanceBundle) -> Tensor:
        return condition_inputs(z_t, img_lat, bundle.r_bar_vis, bundle.r_bar_txt,
                                self.injector_vis, self.injector_txt)

    def denoise(self, t: int, conditioned: Tensor, context: Tensor) -> Tensor:
        return denoise(t, conditioned, context, self.denoiser)


def guidance_context(bundle: GuidanceBundle) -> Tensor:
    """[ē_vis; ē_txt], or V̂ when both enhancers are disabled."""
    rows = [e for e in (bundle.e_bar_vis, bundle.e_bar_txt) if e is not None]
    return concat(rows, axis=0) if rows else bundle.v_hat


def draw_noise_pair(rng: np.random.Generator, shape: Tuple[int, ...], sched: NoiseSchedule) -> Tuple[int, np.ndarray]:
    """t uniform in [1, T], ε standard normal."""
    t = int(rng.integers(1, sched.t_steps + 1))
    return t, rng.standard_normal(shape)


def diffusion_loss(z0_target: np.ndarray, img_lat: Tensor, bundle: GuidanceBundle, sched: NoiseSchedule,
                   editor: LatentEditor, rng: Optional[np.random.Generator] = None,
                   fixed: Optional[Tuple[int, np.ndarray]] = None) -> Tensor:
    """
    mean((ε − ε_δ(t, [z_t, E_I(I)] + R̄_vis + R̄_txt, [ē_vis; ē_txt]))²).

    Args:
        z0_target: target latent, no gradient
        fixed: a frozen (t, ε) pair instead of drawing from ``rng``
    """
    z0 = np.asarray(z0_target)
    if fixed is None:
        if rng is None:
            raise ValueError("diffusion_loss needs an rng when no fixed (t, eps) pair is given")
        fixed = draw_noise_pair(rng, z0.shape, sched)
    t, eps = fixed
    z_t = constant(forward_noising(z0, t, eps, sched))
    predicted = editor.denoise(t, editor.condition(z_t, img_lat, bundle), guidance_context(bundle))
    return mean_all(square(sub(constant(eps), predicted)))


def total_loss(l_mllm: Tensor, l_dm: Tensor, step: int = -1) -> Tensor:
    """
    L = L_MLLM + L_DM.

    Raises:
        NonFiniteLossError: when either term is NaN or infinite
    """
    a, b = l_mllm.item(), l_dm.item()
    if not (math.isfinite(a) and math.isfinite(b)):
        raise NonFiniteLossError(step, a, b)
    return add(l_mllm, l_dm)


def ddim_timesteps(t_steps: int, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("sampling needs at least one step")
    if steps > t_steps:
        raise ValueError(f"steps={steps} exceeds the schedule length {t_steps}")
    return np.round(np.linspace(t_steps, 1, steps)).astype(np.int64)


def sample_edit(img_lat: Tensor, bundle: GuidanceBundle, sched: NoiseSchedule, editor: LatentEditor, steps: int,
                rng: np.random.Generator,
                predict: Optional[Callable[[int, Tensor, Tensor], Tensor]] = None) -> np.ndarray:
    """
    Deterministic DDIM reverse process from a seeded z_T.

    Each step estimates ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t and moves to the next grid time;
    the last step returns ẑ0.

    Returns:
        edited latent [n_grid, d_enc]
    """
    grid = ddim_timesteps(sched.t_steps, steps)
    predict = predict or editor.denoise
    z = rng.standard_normal(img_lat.shape)
    context = guidance_context(bundle)
    z0_hat = z
    for i, t in enumerate(grid):
        t = int(t)
        eps_hat = predict(t, editor.condition(constant(z), img_lat, bundle), context).values
        a = sched.alpha_bar(t)
        z0_hat = (z - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)
        if i + 1 < len(grid):
            a_next = sched.alpha_bar(int(grid[i + 1]))
            z = math.sqrt(a_next) * z0_hat + math.sqrt(1.0 - a_next) * eps_hat
    return z0_hat
