"""Token-level noise scoring, filtering, and masked fine-tuning for a tiny
decoder LM, plus a numerical lab for the gradient-alignment analysis that
justifies the filtering."""

__version__ = "0.1.0"
