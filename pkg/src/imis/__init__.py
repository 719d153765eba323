"""Interactive medical image segmentation toolkit.

Dense interactive-mask generation with quality control, sparse mask storage,
dataset curation, simulated interaction protocols, and a live session service.
"""

__version__ = "0.1.0"
