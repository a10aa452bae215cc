"""Progressive fusion: backprojecting the fused multimodal representation
into the unimodal encoders and unrolling.

Modules: ``autodiff`` (numpy reverse-mode engine), ``models`` (late, early,
pro-fusion and iterative variants), ``tasks`` (synthetic data), ``training``
(fitting, robustness scoring, probes), ``expressiveness`` (linear and
monomial analysis), ``config``/``experiments``/``cli`` (experiment runner).
"""

__version__ = "0.1.0"
