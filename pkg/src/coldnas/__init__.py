"""Search over feature-modulation structures for few-shot cold-start recommendation.

Submodules are imported on demand so that ``coldnas canon`` and the light
helpers do not pay for matplotlib:

- ``numerics``: a small reverse-mode autodiff engine on numpy arrays
- ``modulation`` / ``algebra``: modulation expressions and their canonicalizer
- ``data``, ``model``, ``search``, ``evaluation``: the learning pipeline
- ``cli``: the ``coldnas`` command
"""

__version__ = "0.1.0"
