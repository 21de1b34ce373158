"""Adversarially trained multi-speaker acoustic model with a multi-modal fusion discriminator.

Everything runs on a numpy reverse-mode autodiff engine (:mod:`m2gan.tensor`)
and a seeded synthetic one-to-many corpus (:mod:`m2gan.corpus`).
"""

__version__ = "0.1.0"
