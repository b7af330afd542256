"""Output and worker-pool services for kdvlab."""

from .output_service import OutputService, read_snapshot
from .sweep_service import SweepService

__all__ = ["OutputService", "SweepService", "read_snapshot"]
