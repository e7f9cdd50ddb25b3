"""Desk-scale lab for partial-label learning with OOD detection.

Pipeline: synthetic glyph datasets -> rotation-pretext feature training ->
candidate-set disambiguation via a label-confidence matrix -> partial-energy
and baseline detection scores -> AUPR-IN / FPR95 / accuracy metrics.
"""

__version__ = "0.1.0"
