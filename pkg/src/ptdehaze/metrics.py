"""Quality metrics and model complexity accounting.

MAC counts follow the common convention: convolutions only (k^2*Cin*Cout
per output position); norms, activations, pooling and elementwise adds are
free. Parameter counts include conv weights/biases and norm scale/shift;
batch-norm running statistics are excluded.
"""

import csv
import io
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .distill import ADAPTATION_MLP_RATIO
from .errors import ParameterError, ShapeError
from .generator import IN_CHANNELS, OUT_CHANNELS, GeneratorConfig

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(data_range ** 2 / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    pad = SSIM_WINDOW // 2

    def filt(x):
        return correlate(x, kernel, mode="nearest")

    ua, ub = filt(a), filt(b)
    uaa, ubb, uab = filt(a * a), filt(b * b), filt(a * b)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    vab = uab - ua * ub

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ssim_map = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua ** 2 + ub ** 2 + c1) * (va + vb + c2))
    # border values depend on padding; crop to the fully-valid interior
    return float(ssim_map[pad:-pad, pad:-pad].mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ParameterError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    if a.ndim == 2:
        return _ssim_single(a, b, data_range)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[..., c], b[..., c], data_range)
                              for c in range(a.shape[2])]))
    raise ShapeError(f"expected HxW or HxWxC arrays, got ndim={a.ndim}")


def count_params(model) -> int:
    """Learnable scalars of a torch module (buffers such as running stats excluded)."""
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Analytic complexity accounting


@dataclass
class LayerRow:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    per_layer: list
    input_resolution: tuple

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.per_layer)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.per_layer)

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.per_layer) + 2
        lines = [f"{'layer':<{width}}{'params':>12}{'MACs':>16}"]
        for r in self.per_layer:
            lines.append(f"{r.name:<{width}}{r.params:>12,}{r.macs:>16,}")
        lines.append(f"{'total':<{width}}{self.total_params:>12,}{self.total_macs:>16,}")
        h, w = self.input_resolution
        lines.append(f"input resolution: {h}x{w}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["name", "params", "macs"])
        for r in self.per_layer:
            writer.writerow([r.name, r.params, r.macs])
        writer.writerow(["total", self.total_params, self.total_macs])
        return buf.getvalue()


class _Tally:

    def __init__(self):
        self.rows = []

    def conv(self, name, cin, cout, k, h, w):
        self.rows.append(LayerRow(name, k * k * cin * cout + cout, k * k * cin * cout * h * w))

    def conv_transpose(self, name, cin, cout, k, s, hout, wout):
        # k == s: every output position receives exactly one kernel tap
        taps = (k * k) // (s * s)
        self.rows.append(LayerRow(name, k * k * cin * cout + cout,
                                  cin * cout * taps * hout * wout))

    def norm(self, name, c):
        self.rows.append(LayerRow(name, 2 * c, 0))

    def linear(self, name, cin, cout):
        self.rows.append(LayerRow(name, cin * cout + cout, cin * cout))


def _tally_ptb(t: _Tally, name: str, c: int, r: int, h: int, w: int) -> None:
    t.norm(f"{name}.norm1", c)
    t.norm(f"{name}.norm2", c)
    t.conv(f"{name}.fc1", c, c * r, 1, h, w)
    t.conv(f"{name}.fc2", c * r, c, 1, h, w)


def estimate_macs(cfg: GeneratorConfig, height: int, width: int,
                  include_adaptation: bool = True, adaptation_mode: str = "ptb",
                  teacher_channels: int = 512,
                  adaptation_mlp_ratio: int = ADAPTATION_MLP_RATIO) -> ComplexityReport:
    """Per-layer parameter and MAC accounting for a generator configuration."""
    d = cfg.spatial_divisor
    if height % d or width % d:
        raise ShapeError(f"resolution {height}x{width} must be divisible by {d}")
    chans = cfg.channel_schedule
    t = _Tally()

    # encoder
    in_ch = IN_CHANNELS
    h, w = height, width
    for i, c in enumerate(chans):
        t.conv(f"enc{i}.embed", in_ch, c, 3, h, w)
        for j in range(cfg.n_ptb_per_level):
            _tally_ptb(t, f"enc{i}.ptb{j}", c, cfg.mlp_ratio, h, w)
        in_ch = c
        if i < cfg.levels - 1:
            h, w = h // 2, w // 2

    # bottleneck SPP fusion
    n_branches = len(cfg.spp_pool_sizes) + 1
    t.conv("spp.fuse", chans[-1] * n_branches, chans[-1], 1, h, w)

    # decoder
    for i in reversed(range(cfg.levels - 1)):
        cin, cout = chans[i + 1], chans[i]
        h, w = h * 2, w * 2
        if cfg.decoder_variant == "subpixel":
            merged = cin // 4 + cout
        else:
            t.conv_transpose(f"dec{i}.up", cin, cout, 2, 2, h, w)
            merged = cout + cout
        if cfg.decoder_variant == "ptb":
            t.conv(f"dec{i}.embed", merged, cout, 3, h, w)
            for j in range(max(1, cfg.m_decoder_convs - 1)):
                _tally_ptb(t, f"dec{i}.ptb{j}", cout, cfg.mlp_ratio, h, w)
        else:
            t.conv(f"dec{i}.conv0", merged, cout, 3, h, w)
            for j in range(1, cfg.m_decoder_convs):
                t.conv(f"dec{i}.conv{j}", cout, cout, 3, h, w)

    t.conv("head", chans[0], OUT_CHANNELS, 3, h, w)

    if include_adaptation:
        bh, bw = height // d, width // d
        c = chans[-1]
        if adaptation_mode == "ptb":
            _tally_ptb(t, "adapt.ptb", c, adaptation_mlp_ratio, bh, bw)
        t.conv("adapt.proj", c, teacher_channels, 1, bh, bw)

    return ComplexityReport(per_layer=t.rows, input_resolution=(height, width))


def critic_complexity(channels, convs_per_level: int, height: int, width: int) -> ComplexityReport:
    """Same accounting for the critic encoder."""
    t = _Tally()
    in_ch = 3
    h, w = height, width
    for i, c in enumerate(channels):
        for j in range(convs_per_level):
            t.conv(f"level{i}.conv{j}", in_ch, c, 3, h, w)
            in_ch = c
        if i < len(channels) - 1:
            h, w = h // 2, w // 2
    t.linear("head", channels[-1], 1)
    return ComplexityReport(per_layer=t.rows, input_resolution=(height, width))


def profile_runtime(fn, warmup: int = 2, iters: int = 10):
    """Wall-clock (mean, stddev) in seconds over `iters` calls after warmup."""
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ParameterError(f"warmup must be >= 0, got {warmup}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    arr = np.asarray(samples)
    return float(arr.mean()), float(arr.std())
