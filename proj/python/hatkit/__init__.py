"""Frequency analysis and adversarial training toolkit for small vision models.

The heavy lifting lives in the compiled extension; this package re-exports it.
"""

from hatkit._core import (  # noqa: F401
    HatkitError,
    Model,
    __version__,
    attention_lowpass_decay,
    ce_loss,
    distill_loss,
    filter_image,
    fourier_basis_noise,
    highfreq_energy_ratio,
    make_mask,
    make_synthetic,
    run,
    spectrum_energy_map,
    symmetric_kl,
)

__all__ = [
    "HatkitError",
    "Model",
    "__version__",
    "attention_lowpass_decay",
    "ce_loss",
    "distill_loss",
    "filter_image",
    "fourier_basis_noise",
    "highfreq_energy_ratio",
    "make_mask",
    "make_synthetic",
    "run",
    "spectrum_energy_map",
    "symmetric_kl",
]
