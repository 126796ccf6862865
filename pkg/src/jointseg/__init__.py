"""Joint healthy-tissue and lesion segmentation from disparately labeled data.

Library layout:

- ``volume`` / ``nifti`` / ``labels`` / ``manifest``: data model and I/O
- ``phantom``: synthetic dataset generation
- ``networks``: dual-branch architecture and parameter sets
- ``losses`` / ``metrics``: objectives and evaluation
- ``training``: pretraining, meta co-training, pseudolabels, joint training
- ``adapt``: inference-time adaptation and ensembling
- ``experiments`` / ``report`` / ``cli``: studies, figures and the CLI
"""

__version__ = "0.1.0"
