"""Few-shot adaptation lab: prototypes, linear probes, and LoRA fine-tuning on a miniature ViT."""

from fslab._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
