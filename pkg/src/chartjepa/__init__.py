"""Channel charting with a joint-embedding predictive objective.

Submodules: ``ndnum`` (autodiff tape), ``channelsim`` (synthetic CSI),
``features`` (angle-delay profiles and dissimilarities), ``models``
(encoder, recurrent predictor, checkpoints), ``training``, ``evaluation``
and ``cli``.
"""

__version__ = "0.1.0"
