"""Batch curation of dynamic contrast-enhanced CT liver studies.

Combines rule-based DICOM tag mining with a compact 3D squeeze-excitation
classifier (trained with an aggregated cross-entropy loss that also learns
from coarse "contrast" tags) to identify scan phases and harvest complete
studies, reporting scan- and study-level quality metrics.
"""

__version__ = "0.1.0"
