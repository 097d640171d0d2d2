"""Tiered-memory embedding store: FM caches over a simulated SCM device."""
from .embedding_core import (
    PRUNED,
    EmbeddingTable,
    PruningMap,
    QuantizedRow,
    QueryBatch,
    Role,
    TableMeta,
    dequantize_row,
    pool_rows,
    quantize_row,
)
from .engine import (
    Engine,
    LoadOptions,
    LookupResult,
    ModelManifest,
    Placement,
    PlacementPlan,
    QueryError,
    plan_placement,
)
from .pooled_cache import PooledCache, PooledConfig, sequence_key
from .row_cache import CacheConfig, RowCache
from .scm_device import NAND, OPTANE, DeviceProfile, SimDevice, get_profile

__version__ = "0.1.0"
