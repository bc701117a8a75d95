"""Genotype-by-environment yield prediction.

Modules: ``data`` (loading, QC, folds), ``simgen`` (synthetic trials with
known truth), ``mixed_model`` (factor-analytic REML and label sets),
``kernels`` (GBLUP / G x E BLUP), ``neural`` (encoders and the two-tower
interaction model), ``evaluation`` (metrics and selection), ``tuning`` and
``cli``.
"""

__version__ = "0.1.0"
