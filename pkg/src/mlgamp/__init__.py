"""Multi-layer GAMP estimator and its state evolution"""
