"""Robust ensemble soft actor-critic for bus holding control.

Submodules: ``mdp`` and ``rev`` (tabular operator theory), ``tabular``
(small ensemble learners), ``sim`` (corridor simulator), ``neural`` (numpy
networks), ``trainer``, ``evaluation``, ``verify`` and ``cli``.
"""

__version__ = "0.1.0"
