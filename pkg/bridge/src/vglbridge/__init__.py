from .export import (BridgeError, ExportManifest, build_network, export_batch,
                     export_model, torch_forward, verify_roundtrip)

__version__ = "0.1.0"
