"""Card-scan verification pipeline in simulation: synthetic card sessions,
single-pass OCR head decoding, a bounded-LIFO inference pipeline with
cross-frame voting, server-side verdict rules and device benchmarks."""

from .ocrdecode import DEFAULT_GEOMETRY, HeadGeometry, head_output_len, luhn_valid
from .pipeline import PipelineConfig, ScanResult, run_scan

__all__ = ["DEFAULT_GEOMETRY", "HeadGeometry", "PipelineConfig", "ScanResult",
           "head_output_len", "luhn_valid", "run_scan"]
__version__ = "0.1.0"
