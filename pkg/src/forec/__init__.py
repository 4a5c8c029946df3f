"""Cross-market recommendation: NMF family, MAML pre-training, forking with market heads."""
__version__ = "0.1.0"
