"""
kdvlab - A numerical laboratory for boundary control of the linearized KdV-KdV Boussinesq system.
"""

__version__ = '0.1.0'
