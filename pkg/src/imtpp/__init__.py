"""Marked temporal point processes with missing events.

Submodules: ``core`` (data), ``diffgraph`` (autodiff), ``distributions``,
``obs_mtpp`` and ``miss_mtpp`` (the two recurrent networks), ``trainer``,
``hawkes_sim``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
