"""Desk-scale federated fine-tuning through a compressed proxy model.

Compress a residual backbone by block influence, train the proxy across
clients with conflict-aware regularization and heterogeneity-aware merging,
then plug the trained proxy weights back into the backbone.
"""

__version__ = "0.1.0"
