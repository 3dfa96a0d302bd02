"""Datasets, the model container and the memory-footprint model."""

from .datasets import Dataset, load_cifar10, synth_dataset
from .footprint import (CATEGORIES, GRANULARITIES, FootprintReport, LayerFootprint,
                        csr_break_even, dense_filter_bytes, effective_macs, expected_speedup,
                        expected_speedup_uniform, footprint, per_filter_csr_bytes,
                        per_layer_csr_bytes)
from .modelfile import MAGIC, VERSION, from_bytes, load_model, manifest_text, save_model, to_bytes

__all__ = [
    "CATEGORIES", "GRANULARITIES", "MAGIC", "VERSION", "Dataset", "FootprintReport",
    "LayerFootprint", "csr_break_even", "dense_filter_bytes", "effective_macs", "expected_speedup",
    "expected_speedup_uniform", "footprint", "from_bytes", "load_cifar10", "load_model",
    "manifest_text", "per_filter_csr_bytes", "per_layer_csr_bytes", "save_model",
    "synth_dataset", "to_bytes",
]
