"""Desk-scale multimodal RGB/TIR detector with quad-directional
selective-scan fusion.

Subpackage map:

- ``tensor``: float64 primitives (conv, linear, layer norm, activations)
  plus a finite-difference gradient oracle.
- ``scan2d``: the four deterministic 2D<->1D traversal orders and
  elementwise sequence fusion.
- ``s6``: selective state-space kernel (sequential oracle, associative
  scan, adjoint backward).
- ``cfm``: the cross-modal fusion block built from the above.
- ``detector``: Siamese backbone, fusion taps, neck/head, decode + NMS.
- ``losses`` / ``metrics``: CIoU + smooth BCE training loss, AP/mAP
  evaluation, fused ground-truth preparation.
- ``data`` / ``fileio``: synthetic paired-modality data, annotation and
  checkpoint I/O.
- ``train`` / ``bench`` / ``experiment`` / ``cli``: SGD loop, throughput
  benchmark, fusion-strategy ablation, command-line surface.
"""

__version__ = "0.1.0"
