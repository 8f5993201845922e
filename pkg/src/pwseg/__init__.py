"""CPU inference and cost-accounting engine for a lightweight paired-window
3D segmentation network."""

from .analysis import BenchReport, MadInput, bench, dice, index_to_coords, mad
from .jl import (
    GroupPlan,
    MEDICAL3D_VOLUME_RATIOS,
    NATURAL2D_VOLUME_RATIOS,
    group_size_bound,
    head_channels,
    plan_stages,
)
from .jlc import JlcBlockParams, branch_channel_split, build_jlc_block, jlc_forward, jlc_param_count
from .network import (
    Network,
    NetworkConfig,
    build,
    config_from_dict,
    conv_only,
    flop_breakdown,
    forward,
    param_count,
    total_flops,
)
from .pwa import (
    CostMeter,
    PwaParams,
    WindowSchedule,
    build_pwa_params,
    fit_big_window,
    gather,
    grouped_attention,
    pwa_flops,
    pwa_forward,
    scatter,
    window_schedule,
)
from .sdkt import gram, mmd_poly2, sdkt_grad, sdkt_loss
from .tensor import (
    ConvParams,
    conv3d,
    conv_param_count,
    gelu,
    instance_norm,
    layer_norm,
    matmul,
    max_pool3,
    pointwise_conv,
    softmax_rows,
    voxel_shuffle,
    window_merge,
    window_partition,
)
from .volume_io import SyntheticSpec, gen_synthetic, read, write

__version__ = "0.1.0"
