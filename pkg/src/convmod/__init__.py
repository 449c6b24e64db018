"""Per-class CNN modularization via genetic kernel-group search.

Pipeline: train a dense conv classifier (engine), score and group its
kernels per class (grouping), search bit-vector genomes over those groups
(search + evaluate), decode the winners into physically smaller modules
(decoder), and optionally splice a module into a weak model as a patch
(patching). File formats and cost accounting live in store; the CLI wires
the stages together.
"""

__version__ = "0.1.0"
