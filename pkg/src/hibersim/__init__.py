"""Userspace model of Hibernate Container memory deflation and inflation."""

from .errors import HibersimError
from .host_model import BLOCK_SIZE, PAGE_SIZE, HostMemory, StorageModel
from .lifecycle import ContainerState, LifecycleConfig, Sandbox, cold_start, simple_workload
from .page_allocator import Allocator, HeapSource, control_page_of
from .swap_manager import ReapManifest, SwapManager

__version__ = "0.1.0"

__all__ = [
    "Allocator",
    "BLOCK_SIZE",
    "ContainerState",
    "HeapSource",
    "HibersimError",
    "HostMemory",
    "LifecycleConfig",
    "PAGE_SIZE",
    "ReapManifest",
    "Sandbox",
    "StorageModel",
    "SwapManager",
    "cold_start",
    "control_page_of",
    "simple_workload",
]
