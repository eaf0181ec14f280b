"""Desk-scale adversarial-robustness toolkit.

Subpackages cover the full pipeline: exact projections for zero-mean
l2-bounded perturbations (`geometry`), synthetic noise and data handling
(`noise`, `datasets`), a small convolutional denoiser (`denoiser`), attack
algorithms (`attacks`), neural-ODE classifier blocks (`node`), channel-wise
importance-based feature selection (`cifs`), training loops (`training`),
and the experiment harness plus CLI (`harness`, `cli`).
"""

__version__ = "0.1.0"
