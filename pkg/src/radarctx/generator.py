"""Expected anomaly-free spectrum from visual projection + context, and spectrum losses."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .aligner import RadarPerspectiveProjection
from .config import RadarConfig
from .context import ContextDescriptor
from .dsp import azimuth_kernel, range_kernel


@dataclass(frozen=True)
class GenerationParams:
    lambda_mse: float = 1.0
    lambda_msssim: float = 1.0
    lambda_kld: float = 0.1
    range_support: int = 3        # bins of point-spread kept on each side
    azimuth_support: int = 16
    body_reflectivity: float = 0.5   # m^2 per occupied projection bin
    wall_reflectivity: float = 1.0   # m^2 per visible wall column at full reflectivity
    wall_offset: float = 0.5         # sub-bin position of the wall ridge within its row, fitted
    kld_eps: float = 1e-6
    noise_floor: float = 0.0         # expected noise magnitude per cell, fitted from data
    data_range: float = 1.0          # magnitude mapped to 1 before scoring, fitted from data

    def __post_init__(self):
        if min(self.lambda_mse, self.lambda_msssim, self.lambda_kld) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kld_eps <= 0:
            raise ValueError("kld_eps must be positive")
        if self.data_range <= 0:
            raise ValueError("data_range must be positive")


@lru_cache(maxsize=32)
def _kernel_mats(rc: RadarConfig, range_support: int, azimuth_support: int, offset: float = 0.5):
    """Truncated complex PSF matrices: K_r[m, b] for a source at b + offset, K_a[n, a] at a."""
    dr = np.arange(rc.range_bins)[:, None] - (np.arange(rc.range_bins)[None, :] + offset)
    kr = range_kernel(rc, dr, coherent=True)
    kr[np.abs(dr) > range_support] = 0.0
    da = np.arange(rc.azimuth_bins)[:, None] - np.arange(rc.azimuth_bins)[None, :]
    ka = azimuth_kernel(rc, da, coherent=True)
    ka[np.abs(da) > azimuth_support] = 0.0
    return kr, ka


def render_sources(amp: np.ndarray, rc: RadarConfig, gp: GenerationParams,
                   offset: float = 0.5) -> np.ndarray:
    """Magnitude of the coherent sum of every source's point-spread response.

    Sources carry no relative phase, matching the simulator's signal model, so
    neighbouring sources add like the FFT adds them. ``offset`` places each
    source within its range row (0.5 = row centre).
    """
    kr, ka = _kernel_mats(rc, gp.range_support, gp.azimuth_support, float(offset))
    return np.abs(kr @ amp @ ka.T)


def _bin_ranges(rc: RadarConfig) -> np.ndarray:
    return (np.arange(rc.range_bins) + 0.5) * rc.range_resolution


def body_sources(proj: RadarPerspectiveProjection, ctx: ContextDescriptor, rc: RadarConfig,
                 gp: GenerationParams) -> np.ndarray:
    r = _bin_ranges(rc)
    return (proj.grid * np.sqrt(gp.body_reflectivity) * ctx.material.transmission
            / r[:, None] ** 2)


def wall_sources(proj: RadarPerspectiveProjection, ctx: ContextDescriptor, rc: RadarConfig,
                 gp: GenerationParams) -> np.ndarray:
    """Ridge at the wall's nearest projected range row across its visible columns."""
    amp = np.zeros(proj.grid.shape)
    rows = proj.occupied_range_rows()
    if rows.size == 0 or ctx.material.reflectivity <= 0:
        return amp
    row = rows[0]
    cols = proj.grid.any(axis=0)
    r = _bin_ranges(rc)[row]
    amp[row, cols] = np.sqrt(gp.wall_reflectivity * ctx.material.reflectivity) / r ** 2
    return amp


def generate_expected(proj: RadarPerspectiveProjection, ctx: ContextDescriptor, rc: RadarConfig,
                      gp: GenerationParams = GenerationParams()) -> np.ndarray:
    """Deterministic expected spectrum for an anomaly-free scene.

    through_cloth: every occupied projection bin is a body scatterer scaled by
    the clothing transmission and 1/r^2. Blank wall scenes: only the wall ridge,
    nothing beyond the wall plus kernel support.
    """
    if proj.grid.shape != (rc.range_bins, rc.azimuth_bins):
        raise ValueError(f"projection grid {proj.grid.shape} does not match radar grid")
    if ctx.scenario == "through_cloth":
        out = render_sources(body_sources(proj, ctx, rc, gp), rc, gp)
    else:
        out = render_sources(wall_sources(proj, ctx, rc, gp), rc, gp, gp.wall_offset)
    if gp.noise_floor:
        out = np.sqrt(out ** 2 + gp.noise_floor ** 2)   # signal and noise add in power
    return out.astype(np.float32)


def _fit_wall_offset(pairs, rc: RadarConfig, gp: GenerationParams, steps: int = 10) -> float:
    """Ridge offset in [0, 1) minimising the least-squares residual of a scaled unit render."""
    best, best_sse = gp.wall_offset, np.inf
    for off in np.arange(steps) / steps:
        unit = replace(gp, wall_reflectivity=1.0, noise_floor=0.0, wall_offset=float(off))
        gg = go = oo = 0.0
        for proj, ctx, observed in pairs:
            g = generate_expected(proj, ctx, rc, unit).astype(float)
            o = np.asarray(observed, dtype=float)
            gg, go, oo = gg + float((g * g).sum()), go + float((g * o).sum()), oo + float((o * o).sum())
        if gg == 0:
            return gp.wall_offset
        sse = oo - go * go / gg
        if sse < best_sse:
            best, best_sse = float(off), sse
    return best


def fit_generation_params(pairs, rc: RadarConfig, gp: GenerationParams = GenerationParams()
                          ) -> GenerationParams:
    """Amplitude prior and noise floor from anomaly-free (projection, context, observed) triples.

    Wall scenes first pick the ridge's sub-bin offset that best explains the
    observations up to a common scale. The floor is the mean observed
    magnitude over cells the unit render leaves
    empty. The amplitude is then found by bisection so the generated spectra
    carry the same total magnitude as the observations. The reflectivity prior
    is the amplitude squared, and the largest observed magnitude becomes the
    scoring ``data_range``.
    """
    pairs = list(pairs)
    if pairs and pairs[0][1].scenario != "through_cloth":
        gp = replace(gp, wall_offset=_fit_wall_offset(pairs, rc, gp))
    unit = replace(gp, body_reflectivity=1.0, wall_reflectivity=1.0, noise_floor=0.0)
    gs, target, peak = [], 0.0, 0.0
    empty_sum = empty_n = 0.0
    scenario = None
    for proj, ctx, observed in pairs:
        scenario = ctx.scenario
        g = generate_expected(proj, ctx, rc, unit).astype(float)
        o = np.asarray(observed, dtype=float)
        peak = max(peak, float(o.max()))
        empty_sum += float(o[g == 0].sum())
        empty_n += float((g == 0).sum())
        gs.append(g[g > 0])
        target += float(o[g > 0].sum())
    if scenario is None:
        return gp
    floor = empty_sum / empty_n if empty_n else 0.0
    gp = replace(gp, data_range=peak if peak > 0 else gp.data_range)
    g = np.concatenate(gs) if gs else np.zeros(0)
    if g.size == 0 or target <= floor * g.size:
        return replace(gp, noise_floor=floor)

    def excess(a):
        return float(np.sqrt((a * g) ** 2 + floor ** 2).sum()) - target

    lo, hi = 0.0, 1.0
    while excess(hi) < 0:
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if excess(mid) < 0 else (lo, mid)
    refl = (0.5 * (lo + hi)) ** 2
    if scenario == "through_cloth":
        return replace(gp, body_reflectivity=refl, noise_floor=floor)
    return replace(gp, wall_reflectivity=refl, noise_floor=floor)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def _box_mean(x: np.ndarray, w: int) -> np.ndarray:
    """Mean over every w x w window (valid region)."""
    c = np.pad(x, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    s = c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]
    return s / (w * w)


def _ssim_terms(a: np.ndarray, b: np.ndarray, win: int, c1: float, c2: float):
    mu_a, mu_b = _box_mean(a, win), _box_mean(b, win)
    va = _box_mean(a * a, win) - mu_a ** 2
    vb = _box_mean(b * b, win) - mu_b ** 2
    cov = _box_mean(a * b, win) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (va + vb + c2)
    return lum, cs


def ssim(a, b, win: int = 7, data_range: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    lum, cs = _ssim_terms(a, b, win, (0.01 * data_range) ** 2, (0.03 * data_range) ** 2)
    return float(np.mean(lum * cs))


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b, scales: int = 3, win: int = 7, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with equal scale weights.

    Contrast-structure means from every scale and the luminance from the
    coarsest are combined as a product of signed powers, so the result stays
    in [-1, 1].
    """
    a, b = _check_pair(a, b)
    if a.ndim != 2 or min(a.shape) < 32:
        raise ValueError(f"ms_ssim needs 2-D inputs with min dim >= 32, got {a.shape}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    weight = 1.0 / scales
    out = 1.0
    for s in range(scales):
        lum, cs = _ssim_terms(a, b, win, c1, c2)
        v = float(np.mean(lum * cs)) if s == scales - 1 else float(np.mean(cs))
        out *= np.sign(v) * abs(v) ** weight
        a, b = _pool2(a), _pool2(b)
    return float(out)


def kld(p_raw, q_raw, eps: float = 1e-6) -> float:
    """KL(p || q) after adding ``eps`` per cell and normalising each grid to sum 1."""
    p, q = _check_pair(p_raw, q_raw)
    p = p + eps
    q = q + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def generation_quality(gen, real, gp: GenerationParams = GenerationParams()) -> float:
    """lambda_mse * MSE + lambda_msssim * (1 - MS-SSIM) + lambda_kld * KL(real || gen).

    Both grids are divided by ``gp.data_range`` first, so MSE and MS-SSIM see
    magnitudes on a fixed unit scale that does not depend on either input.
    """
    gen, real = _check_pair(gen, real)
    gen = gen / gp.data_range
    real = real / gp.data_range
    total = 0.0
    if gp.lambda_mse:
        total += gp.lambda_mse * mse(gen, real)
    if gp.lambda_msssim:
        total += gp.lambda_msssim * (1.0 - ms_ssim(gen, real))
    if gp.lambda_kld:
        total += gp.lambda_kld * kld(real, gen, gp.kld_eps)
    return float(total)


def spectrum_features(s, block: int = 8) -> np.ndarray:
    """Block-mean pooled spectrum, flattened; the embedding for Frechet comparisons."""
    s = np.asarray(s, dtype=float)
    h, w = s.shape
    return s[: h // block * block, : w // block * block].reshape(
        h // block, block, w // block, block).mean(axis=(1, 3)).ravel()
