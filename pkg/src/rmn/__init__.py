"""Video caption decoder that picks one of three reasoning modules per word.

Built on a small numpy autograd engine (:mod:`rmn.tensor`).
"""

__version__ = "0.1.0"
