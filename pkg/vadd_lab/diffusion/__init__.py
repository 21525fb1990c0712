# vadd_lab/diffusion/__init__.py

"""Run lifecycle: training, checkpoints, loss logs, oracle suites, artifacts."""
