"""matchmap: center-point matching heatmaps, from targets to metrics.

Stage 1 turns boxes, masks and keypoints into Gaussian matching heatmaps
and trains a small query-conditioned dense aligner against them; stage 2
decodes the heatmaps into task outputs (boxes, keypoints, mask prompts,
counts) and scores them with COCO-style metrics.
"""

from .grid import (
    BinaryMask,
    Box,
    Heatmap,
    Instance,
    Keypoint,
    LogitGrid,
    TaskKind,
    Visibility,
    box_iou,
    box_to_grid_center,
    mask_iou,
    mask_to_box,
    rasterize_box,
)
from .encode import (
    EncodeConfig,
    SizeTargets,
    encode_detection,
    encode_keypoints,
    encode_segmentation,
    gaussian_radius,
    sigma_from_radius,
    splat_gaussian,
)
from .losses import (
    FocalParams,
    LossWeights,
    gaussian_focal_loss,
    size_l1_loss,
    total_loss,
)
from .decode import (
    CropTransform,
    DecodeConfig,
    MaskPrompt,
    PeakPoint,
    TaskResult,
    box_readout,
    crop_for_pose,
    decode_task,
    mask_from_prompt,
    nms,
    peak_select,
)
from .metrics import (
    EvalReport,
    MatchSpec,
    OksParams,
    average_precision,
    cumulative_iou,
    detection_map,
    keypoint_map,
    oks,
    segmentation_map,
)
from .dataio import (
    ConversationSample,
    DataFormatError,
    Dataset,
    ImageInfo,
    SynthConfig,
    load_annotations,
    read_heatmap,
    render_conversation,
    synth_shapes,
    write_annotations,
    write_heatmap,
)

__version__ = "0.1.0"
