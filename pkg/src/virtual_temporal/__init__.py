"""Virtual temporal sequences from annotated stills for recurrent semantic segmentation."""
from .core import (
    AnnotatedStill,
    ExperimentConfig,
    FeedbackSpec,
    Frame,
    FrameSequence,
    MotionModel,
    RunRecord,
    load_dataset,
    read_config,
)
from .model import FeedbackUNet, build_network
from .sequencer import generate_virtual_sequence, plan_template, virtual_sequences

__version__ = "0.1.0"
