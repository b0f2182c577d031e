"""flowdecon: deconstruction of smooth flows along circle-eigenfunction foliations.

Core objects: registry prototype systems (``dynamics``), circle eigenfunctions
and frequency certificates (``eigenfunctions``), projected stage fields
(``geometry``), leaf/return-map/suspension machinery (``deconstruction``),
the tower change of variables and spectral splitting (``conjugacy``), mixing
diagnostics (``diagnostics``), and a config-driven CLI (``cli``).
"""

__version__ = "0.1.0"
