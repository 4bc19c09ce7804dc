"""fedloc: a deterministic simulator of federated WiFi-fingerprint localization.

Single-process federated averaging over UJIIndoorLoc-format corpora, with
cross-device / cross-time transfer pipelines and one-vs-all federated floor
classification for two-step 3D positioning.
"""

__version__ = "0.1.0"
