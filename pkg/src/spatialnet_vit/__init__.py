"""SpatialNet-ViT: a numpy vision transformer with multi-task heads.

Everything, including reverse-mode differentiation, is implemented on top of
numpy so the model can be trained and gradient-checked at desk scale.
"""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import (
    Dataset,
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_image,
    load_manifest,
    write_image,
    write_synthetic,
)
from .encoder import EncoderConfig, patchify, preset_config, unpatchify
from .gradcheck import GradCheckReport, gradcheck
from .heads import (
    LossReport,
    RegularizationConfig,
    TaskSet,
    TaskSpec,
    cross_entropy,
    final_loss,
    l2_reg,
    mse,
    mtl_loss,
)
from .metrics import (
    MetricReport,
    VqaRecord,
    bleu,
    caption_report,
    cider,
    meteor_lite,
    rouge_l,
    vqa_accuracy,
)
from .model import SpatialNetViT
from .tensor import Tensor, backward
from .trainer import TrainConfig, TrainLog, evaluate, train

__version__ = "0.1.0"
