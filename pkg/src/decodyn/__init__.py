"""Decoupled dynamics pretraining for visuomotor policies, desk scale.

A future-prediction diffusion model and a discrete inverse-dynamics model
are pretrained separately on a synthetic 2D manipulation world, then
coupled through a small diffusion action head and adapted on labeled
demonstrations. Everything runs in double precision on a single CPU core
and is reproducible bit-for-bit from (config, seed).
"""

__version__ = "0.1.0"
