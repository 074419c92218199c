"""Synthetic cloud scenes, a toy bi-spectral radiance model, target
transforms and window-based tiling.

The forward model is deliberately simple and analytically invertible:

    R066 = albedo + (1 - albedo) * tau / (tau + gamma)
    R213 = R066 * exp(-beta * re)

followed by an optional horizontal "3D" perturbation

    R'(i, j) = R(i, j) + eta * (R(i, j) - R(i, j + shift))

which brightens pixels whose down-sun neighbour is darker and darkens
those whose neighbour is brighter.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, ConfigError, DomainError, FormatError, ShapeError, TruncatedFileError

CER_SCALE = 30.0
PLANES = ("cot", "cer", "r066", "r213")
CPF_MAGIC = b"CPF1"


@dataclass(frozen=True)
class GenParams:
    slope: float = 3.0
    q_clear: float = 0.4
    mu: float = 1.0
    sigma: float = 1.0
    re_min: float = 5.0
    re_max: float = 30.0
    a: float = 1.5
    rho: float = 0.5  # correlation between the COT and CER driving fields


@dataclass(frozen=True)
class ForwardModelParams:
    gamma: float = 7.0
    beta: float = 0.06
    albedo: float = 0.05
    effect3d_eta: float = 0.3
    effect3d_shift: int = 2

    def validate(self):
        if self.gamma <= 0 or self.beta <= 0:
            raise ConfigError("gamma and beta must be positive")
        if not 0 <= self.albedo < 1:
            raise ConfigError(f"albedo must lie in [0, 1), got {self.albedo}")
        if not 0 <= self.effect3d_eta < 1:
            raise ConfigError(f"effect3d_eta must lie in [0, 1), got {self.effect3d_eta}")
        return self

    def unperturbed(self):
        return ForwardModelParams(self.gamma, self.beta, self.albedo, 0.0, self.effect3d_shift)


@dataclass
class CloudProfile:
    cot: np.ndarray  # [H, W]
    cer: np.ndarray  # [H, W], micrometres, 0 where clear
    radiance: np.ndarray | None = None  # [2, H, W]

    @property
    def shape(self):
        return self.cot.shape

    def planes(self):
        out = {"cot": self.cot, "cer": self.cer}
        if self.radiance is not None:
            out["r066"], out["r213"] = self.radiance[0], self.radiance[1]
        return out


# -- scene generation ----------------------------------------------------

def gaussian_random_field(rng, h, w, slope):
    """Zero-mean, unit-variance periodic field with power spectrum ~ |k|^-slope."""
    noise = rng.standard_normal((h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.rfftfreq(w)[None, :]
    k = np.sqrt(kx * kx + ky * ky)
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (-slope / 2.0)
    g = np.fft.irfft2(np.fft.rfft2(noise) * amp, s=(h, w))
    g -= g.mean()
    sd = g.std()
    return g / sd if sd > 0 else g


def generate_profile(seed, h=144, w=144, params=GenParams()):
    if h < 64 or w < 64:
        raise ConfigError(f"profile dims must be >= 64, got {h}x{w}")
    if not 0 <= params.q_clear < 1 or params.re_max <= params.re_min:
        raise ConfigError("invalid generator parameters")
    rng = np.random.default_rng(seed)
    g1 = gaussian_random_field(rng, h, w, params.slope)
    g_ind = gaussian_random_field(rng, h, w, params.slope)
    g2 = params.rho * g1 + np.sqrt(1.0 - params.rho ** 2) * g_ind
    cloudy = g1 > np.quantile(g1, params.q_clear)
    cot = np.where(cloudy, np.exp(params.mu + params.sigma * g1), 0.0)
    gate = 1.0 / (1.0 + np.exp(-params.a * g2))
    cer = np.where(cloudy, params.re_min + (params.re_max - params.re_min) * gate, 0.0)
    return CloudProfile(cot=cot, cer=cer)


def forward_radiance(cot, cer, p=ForwardModelParams()):
    """Two-band radiance [2, H, W] for the given COT / CER fields."""
    p.validate()
    cot = np.asarray(cot, dtype=np.float64)
    cer = np.asarray(cer, dtype=np.float64)
    if cot.shape != cer.shape or cot.ndim != 2:
        raise ShapeError(f"cot {cot.shape} and cer {cer.shape} must be equal 2-D fields")
    if np.any(cot < 0):
        raise DomainError("cot must be nonnegative")
    r066 = p.albedo + (1.0 - p.albedo) * cot / (cot + p.gamma)
    r213 = r066 * np.exp(-p.beta * np.where(cot > 0, cer, 0.0))
    rad = np.stack([r066, r213])
    if p.effect3d_eta > 0:
        rad = apply_3d_effect(rad, p.effect3d_eta, p.effect3d_shift)
    return rad


def apply_3d_effect(rad, eta, shift):
    w = rad.shape[-1]
    idx = np.clip(np.arange(w) + shift, 0, w - 1)
    out = rad + eta * (rad - rad[..., idx])
    return np.clip(out, 0.0, 1.5)


def synth_profile(seed, h=144, w=144, gen=GenParams(), fwd=ForwardModelParams()):
    prof = generate_profile(seed, h, w, gen)
    prof.radiance = forward_radiance(prof.cot, prof.cer, fwd)
    return prof


# -- target transforms ---------------------------------------------------

def transform_cot(cot):
    cot = np.asarray(cot, dtype=np.float64)
    if np.any(cot < 0):
        raise DomainError("transform_cot: negative optical thickness")
    return np.log1p(cot)


def inverse_transform_cot(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise DomainError("inverse_transform_cot: negative transformed value")
    return np.maximum(np.expm1(t), 0.0)


def predicted_cot(t):
    """Physical COT from a model output, which may dip slightly below zero."""
    return inverse_transform_cot(np.maximum(np.asarray(t, dtype=np.float64), 0.0))


def scale_cer(cer):
    cer = np.asarray(cer, dtype=np.float64)
    if np.any(cer < 0):
        raise DomainError("scale_cer: negative effective radius")
    return cer / CER_SCALE


def unscale_cer(s):
    return np.asarray(s, dtype=np.float64) * CER_SCALE


# -- window tiling -------------------------------------------------------

def _axis_offsets(extent, window, stride):
    offs = list(range(0, extent - window + 1, stride))
    if offs[-1] != extent - window:
        offs.append(extent - window)
    return offs


@dataclass(frozen=True)
class TileIndex:
    """Row-major list of (row, col) window offsets covering an H x W field."""

    offsets: tuple
    window: int
    height: int
    width: int

    def __len__(self):
        return len(self.offsets)

    def __iter__(self):
        return iter(self.offsets)

    def __getitem__(self, k):
        return self.offsets[k]

    def coverage(self):
        count = np.zeros((self.height, self.width), dtype=np.int64)
        for r, c in self.offsets:
            count[r:r + self.window, c:c + self.window] += 1
        return count


def build_tile_index(h, w, window=64, stride=40):
    if window > h or window > w:
        raise ConfigError(f"window {window} exceeds field {h}x{w}")
    if not 1 <= stride <= window:
        raise ConfigError(f"stride must lie in [1, window], got {stride}")
    rows = _axis_offsets(h, window, stride)
    cols = _axis_offsets(w, window, stride)
    return TileIndex(tuple((r, c) for r in rows for c in cols), window, h, w)


def extract_patches(field, idx):
    """Cut window patches out of ``field`` ([..., H, W] array or a CloudProfile's radiance)."""
    if isinstance(field, CloudProfile):
        if field.radiance is None:
            raise ShapeError("profile has no radiance to extract")
        field = field.radiance
    field = np.asarray(field)
    if field.shape[-2:] != (idx.height, idx.width):
        raise ShapeError(f"field dims {field.shape[-2:]} do not match tile index {idx.height}x{idx.width}")
    k = idx.window
    return [field[..., r:r + k, c:c + k].copy() for r, c in idx]


def aggregate_patches(patch_preds, idx):
    """Average overlapping patch predictions back into an [H, W] field."""
    if len(patch_preds) != len(idx):
        raise ShapeError(f"{len(patch_preds)} predictions for {len(idx)} tiles")
    k = idx.window
    total = np.zeros((idx.height, idx.width))
    count = np.zeros((idx.height, idx.width))
    for pred, (r, c) in zip(patch_preds, idx):
        pred = np.asarray(pred, dtype=np.float64)
        pred = pred.reshape(pred.shape[-2:]) if pred.ndim == 3 and pred.shape[0] == 1 else pred
        if pred.shape != (k, k):
            raise ShapeError(f"patch prediction shape {pred.shape}, expected {(k, k)}")
        total[r:r + k, c:c + k] += pred
        count[r:r + k, c:c + k] += 1
    if np.any(count == 0):
        raise AssertionError("tile index left pixels uncovered")
    return total / count


def split_dataset(items, ratios=(0.6, 0.2, 0.2), seed=0):
    """Seeded shuffle followed by contiguous train/val/test split."""
    items = list(items)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{n} items cannot fill three nonempty splits at ratios {ratios}")
    shuffled = [items[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# -- CPF profile files ---------------------------------------------------

def profile_bytes(planes):
    """Serialize a mapping plane-name -> [H, W] array (subset of cot, cer, r066, r213)."""
    present = [name for name in PLANES if planes.get(name) is not None]
    if not present:
        raise ShapeError("no planes to write")
    h, w = np.asarray(planes[present[0]]).shape
    head = CPF_MAGIC + struct.pack("<III", h, w, len(present))
    if len(present) < len(PLANES):
        head += struct.pack("<B", sum(1 << PLANES.index(n) for n in present))
    body = []
    for name in present:
        a = np.asarray(planes[name], dtype=np.float64)
        if a.shape != (h, w):
            raise ShapeError(f"plane {name} has shape {a.shape}, expected {(h, w)}")
        body.append(a.astype("<f4").tobytes())
    return head + b"".join(body)


def profile_from_bytes(buf):
    if len(buf) < 16:
        raise TruncatedFileError("profile file shorter than its header")
    if buf[:4] != CPF_MAGIC:
        raise BadMagicError(f"not a CPF1 profile (magic {bytes(buf[:4])!r})")
    h, w, c = struct.unpack("<III", buf[4:16])
    pos = 16
    if c == len(PLANES):
        names = list(PLANES)
    elif 1 <= c < len(PLANES):
        if len(buf) < 17:
            raise TruncatedFileError("missing plane-presence mask")
        mask = buf[16]
        names = [n for i, n in enumerate(PLANES) if mask & (1 << i)]
        pos = 17
        if len(names) != c:
            raise FormatError(f"presence mask {mask:#x} lists {len(names)} planes, header says {c}")
    else:
        raise FormatError(f"invalid plane count {c}")
    n = h * w * 4
    if len(buf) < pos + c * n:
        raise TruncatedFileError(f"expected {pos + c * n} bytes, file has {len(buf)}")
    if len(buf) > pos + c * n:
        raise FormatError("trailing bytes after last plane")
    out = {}
    for name in names:
        out[name] = np.frombuffer(buf[pos:pos + n], dtype="<f4").astype(np.float64).reshape(h, w)
        pos += n
    return out


def write_profile(path, planes):
    if isinstance(planes, CloudProfile):
        planes = planes.planes()
    with open(path, "wb") as fh:
        fh.write(profile_bytes(planes))


def read_profile(path):
    with open(path, "rb") as fh:
        return profile_from_bytes(fh.read())


def planes_to_profile(planes):
    rad = None
    if "r066" in planes and "r213" in planes:
        rad = np.stack([planes["r066"], planes["r213"]])
    return CloudProfile(cot=planes.get("cot"), cer=planes.get("cer"), radiance=rad)
