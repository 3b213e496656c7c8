"""Desk-scale experiment engine comparing cross-entropy, triplet and SimCLR
training for letter recognition under a combinatorial augmentation sweep."""

__version__ = "0.1.0"
