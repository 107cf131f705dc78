"""Hierarchical space-time memory matching.

Kernel-guided dense memory read at the coarsest scale, top-k guided sparse
reads at finer scales, and the memory bank / track cache that drive them.
"""

from .coarse import CoarseReadInput, CoarseReadOutput, dense_affinity, kernel_guided_read, vanilla_read
from .fine import (
    FineReadInput,
    TopKIndexSet,
    expand_to_fine,
    residual_fuse,
    select_topk_candidates,
    sparse_read,
)
from .kernel import (
    KernelParams,
    TrackTable,
    build_kernel_guidance,
    chain_tracks,
    gaussian_kernel_map,
    local_track_hop,
)
from .pipeline import KeyValue, MemoryBank, RetentionPolicy, bank_insert, hierarchical_read, soft_aggregate
from .tensor import OpCounter

__version__ = "0.1.0"
