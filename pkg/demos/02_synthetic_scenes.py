"""
Synthetic cloud scenes and their radiance
=========================================

Two correlated Gaussian random fields drive optical thickness and droplet
size. A toy two-band forward model turns them into radiance, and a
horizontal shear mimics illumination and shadowing at cloud edges.
"""
import tempfile
from pathlib import Path

import numpy as np

from cloudcam import data as D
from cloudcam.cli import pgm_bytes

prof = D.generate_profile(seed=7, h=144, w=144)
cloudy = prof.cot > 0
print(f"cloud fraction {cloudy.mean():.2f}")
print(f"COT  median {np.median(prof.cot[cloudy]):.2f}, max {prof.cot.max():.1f}")
print(f"CER  range {prof.cer[cloudy].min():.1f} .. {prof.cer[cloudy].max():.1f} um")

# Radiance with and without the edge effect.
flat = D.forward_radiance(prof.cot, prof.cer, D.ForwardModelParams(effect3d_eta=0.0))
shear = D.forward_radiance(prof.cot, prof.cer, D.ForwardModelParams(effect3d_eta=0.3))
d = shear[0] - flat[0]
print(f"0.66 um change from the edge effect: {d.min():+.3f} .. {d.max():+.3f}")

# Targets live in log(COT + 1) and CER / 30.
print("transformed COT max:", D.transform_cot(prof.cot).max().round(3))
print("scaled CER max:     ", D.scale_cer(prof.cer).max().round(3))

# Windows of 64 pixels every 40 pixels cover a 144 field with 9 tiles.
idx = D.build_tile_index(144, 144, window=64, stride=40)
print("tile offsets:", list(idx))
print("pixels covered 1/2/4 times:", np.bincount(idx.coverage().ravel())[[1, 2, 4]])

out = Path(tempfile.mkdtemp())
prof.radiance = shear
D.write_profile(out / "scene.cpf", prof)
(out / "cot.pgm").write_bytes(pgm_bytes(D.transform_cot(prof.cot)))
(out / "r066.pgm").write_bytes(pgm_bytes(shear[0]))
print("wrote", sorted(p.name for p in out.iterdir()), "to", out)
