"""Self-speculative decoding with a hierarchical 4-bit KV cache.

Subpackages: dense kernels (:mod:`.tensor`), two-plane quantization
(:mod:`.quant`), the buffered KV cache (:mod:`.cache`), the toy decoder
(:mod:`.model`), the draft/verify loop (:mod:`.specdec`), the cost analyzer
(:mod:`.roofline`) and the experiment CLI (:mod:`.cli`).
"""

from .cache import CacheLayout, CacheView, FpKVCache, HierarchicalKVCache, MemoryReport
from .errors import (
    BufferOverflowError,
    CacheIntegrityError,
    ConfigError,
    DataError,
    DimensionError,
    EmptyPromptError,
    FormatError,
    QuantSpecError,
)
from .model import (
    ModelConfig,
    ModelWeights,
    QuantizedModelWeights,
    StepCost,
    chunked_attention,
    decode_step,
    init_weights,
    load_weights,
    prefill,
    quantize_model_weights,
    save_weights,
)
from .quant import (
    GroupQuantParams,
    QuantizedLinear,
    QuantPlane,
    decode_plane_draft,
    decode_plane_target,
    dequant_group_draft,
    dequant_group_target,
    dequantize_weights,
    encode_plane_hierarchical,
    hierarchical_encode,
    quantize_group_asym_u4,
    quantize_group_sym_s4,
    quantize_weights,
)
from .roofline import (
    HardwareSpec,
    LLAMA2_7B,
    ModelDims,
    WorkloadPoint,
    classify,
    count_decode,
    count_prefill,
    kv_memory_sweep,
    speedup_model,
)
from .specdec import (
    Metrics,
    RunResult,
    SpecConfig,
    SpecDecodeTrace,
    SpeculativeDecoder,
    autoregressive_decode,
    speculative_sample_step,
)

__version__ = "0.1.0"
