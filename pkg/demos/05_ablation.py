"""
Attention and objective ablation
================================

Same data, same seeds, four variants: plain UNet, UNet with channel
attention on the skips, two-head CAM with an unweighted loss, and CAM
with the CER-weighted loss. Deliberately tiny so it runs in a few
minutes; differences at this scale are noisy.
"""
from cloudcam import data as D
from cloudcam.model import ModelConfig
from cloudcam.training import REFERENCE_ABLATION, TrainConfig, ablation_csv, run_ablation

profiles = [D.synth_profile(seed, 64, 64) for seed in range(20)]
rows = run_ablation(profiles[:12], profiles[12:16], profiles[16:],
                    base_model=ModelConfig(base_width=8, window=32),
                    base_cfg=TrainConfig(batch=16, max_epochs=15, patience=15, stride=32),
                    seeds=(0, 1))
print(ablation_csv(rows))

print("reference MAEs on LES scenes (different data, not comparable in scale):")
for (method, objective), (cot, cer) in REFERENCE_ABLATION.items():
    print(f"  {method:22s} {objective:4s} COT {cot:.3f}  CER {cer:.3f}")
