"""
Night-style images and how faithful they stay
=============================================

``night_transform`` darkens, warms, adds light blooms and sensor noise. The
faithfulness metrics say how much of the day image survives.
"""

import numpy as np

from nocbench.nightgen import NightParams, faithfulness, night_transform
from nocbench.synthdata import SynthConfig, generate

manifest, images = generate(SynthConfig(n_places=3, views_per_place=1, image_size=32, seed=7))
day = images[0].astype(np.float64)
print("day image", day.shape, "mean brightness", round(day.mean(), 3))

###############################################################################
# The default parameters. The same seed always gives the same blooms and noise.

night = night_transform(day, NightParams(seed=1))
print("night mean brightness", round(night.mean(), 3))
print("faithfulness:", {k: round(v, 3) for k, v in faithfulness(day, night).items()})
assert night_transform(day, NightParams(seed=1)).tobytes() == night.tobytes()

###############################################################################
# Sweeping one knob at a time. Darker and noisier images drift further from
# the day view, which shows up as a lower PSNR and SSIM.

print(f"{'brightness':>10} {'l2':>7} {'psnr':>7} {'ssim':>7}")
for b in (0.9, 0.6, 0.3, 0.1):
    p = NightParams(brightness=b, bloom_count=0, noise_sigma=0.0)
    f = faithfulness(day, night_transform(day, p))
    print(f"{b:>10.1f} {f['l2']:7.1f} {f['psnr_db']:7.2f} {f['ssim']:7.3f}")

# noise alone, with the darkening switched off so it is the only change
print(f"{'noise':>10} {'psnr':>7}")
for sigma in (0.0, 0.02, 0.05, 0.1):
    p = NightParams(gamma=1.0, brightness=1.0, temp_shift=0.0, bloom_count=0, noise_sigma=sigma, seed=3)
    print(f"{sigma:>10.2f} {faithfulness(day, night_transform(day, p))['psnr_db']:7.2f}")

###############################################################################
# The identity parameters leave an image untouched.

assert np.array_equal(night_transform(day, NightParams.identity()), day)
print("identity transform is exact")
