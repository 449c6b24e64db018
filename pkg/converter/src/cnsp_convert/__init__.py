"""Checkpoint-to-CNSP converter.

Bridges framework-native state dicts into the modularization toolkit's
weight container and spec text, coupling only through those file formats
and the toolkit CLI.
"""

__version__ = "0.1.0"
