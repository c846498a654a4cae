"""vadlab: view augmentation vs. view-label classification, at desk scale."""

__version__ = "0.1.0"
