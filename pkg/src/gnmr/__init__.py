"""Gated graph neural networks for remaining-useful-life regression."""
