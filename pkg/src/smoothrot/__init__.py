"""Channel-wise scaling fused with Hadamard rotation for quantization-friendly
GLU transformer blocks, plus the experiment harness that verifies the
outlier-suppression and quantization-error behavior against rotation-only
and untransformed baselines."""

__version__ = "0.1.0"

from .numerics import Rng, ShapeError, matmul, rel_inf_error
from .archive import (
    ArchiveError,
    LengthMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
    load_archive,
    save_archive,
)
from .quantizer import (
    QuantParams,
    QuantSpec,
    QuantizedTensor,
    compute_qparams,
    dequantize,
    fake_quant,
    quantize,
    quantize_tensor,
)
from .rotation import (
    OrthogonalTransform,
    apply_equivalent_transform,
    hadamard_matrix,
    random_hadamard,
    walsh_hadamard,
)
from .model import (
    AttentionBlock,
    DecoderLayer,
    FfnBlock,
    ForwardTrace,
    KvCache,
    ModelConfig,
    QuantConfig,
    RmsNorm,
    TinyModel,
    attention_forward,
    build_model,
    ffn_forward,
    fuse_rmsnorm,
    load_model,
    model_forward,
    rotate_model,
    save_model,
)
from .smoothing import (
    CalibrationStats,
    SmoothingFactors,
    alpha_search,
    collect_act_stats,
    compute_scales,
    fuse_smoothing,
    smooth_model,
)
from .weight_quant import (
    ClipSearchConfig,
    GptqConfig,
    gptq_quantize_weight,
    proxy_loss,
    quantize_model_weights,
    rtn_quantize_weight,
)
from .outliers import (
    OutlierProfile,
    detect_massive,
    gen_outlier_activations,
    inject_outlier_circuit,
    magnitude_report,
)
from .config import ConfigError, ExperimentConfig, build_config, parse_config_file
from .harness import (
    ExperimentError,
    RunReport,
    calib_source_ablation,
    compare_variants,
    run_experiment,
    sweep_alpha,
)
