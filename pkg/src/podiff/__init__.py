"""Decentralized state estimation with conditional denoising diffusion.

Submodules: ``env`` (sensor-network instances, exact posteriors, data),
``denoiser`` (numpy MLP, training, Jacobians, model files), ``flow``
(fixed-point flows), ``analysis`` (deviations and bounds), ``composite``
(multi-agent composite diffusion), ``config`` and ``cli``.

The package root imports nothing heavy so the CLI can set thread limits
before numpy loads.
"""

__version__ = "0.1.0"
