# vadd_lab/__init__.py

"""Variational masked diffusion (VADD) and the MDLM baseline on 2-D toy densities."""

__version__ = "1.0.0"
