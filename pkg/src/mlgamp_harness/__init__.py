"""Experiments and command line for the multi-layer estimator"""
