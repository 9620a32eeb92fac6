"""Language-guided multi-choice visual question answering.

Scores each answer candidate by image-text matching (dual-encoder or
query-fusion), optionally concatenating or feature-merging auxiliary
guidance text (rationales, explanations, captions, scene graphs, object
lists, lectures), and fine-tunes backends with softmax cross-entropy over
the choices.
"""

from .core import (
    ChoiceScores,
    DatasetName,
    Difficulty,
    GuidanceBundle,
    GuidanceKind,
    LossRecord,
    MultiChoiceInstance,
    read_instances,
    validate_instance,
    write_instances,
)
from .backends import (
    DualEncoderBackend,
    FusionBackend,
    GuidedProjectionHead,
    ToyDualEncoder,
    ToyFusionBackend,
    dual_match,
    extend_positional_table,
    fusion_match,
    load_checkpoint,
    match,
    merge_features,
    save_checkpoint,
    toy_backend,
)
from .scoring import (
    PredictionRecord,
    PromptAssembly,
    ScoringMode,
    assemble_prompt,
    evaluate_instances,
    predict,
    score_instance,
)
from .guidance import (
    DetectionSet,
    GeneratorContract,
    GuidanceCache,
    SceneTriplet,
    combine,
    serialize_objects,
    serialize_scene_graph,
    stub_generator,
)
from .training import (
    TrainConfig,
    TrainResult,
    choice_cross_entropy,
    cross_entropy_gradient,
    freeze_policy,
    train,
)
from .data import question_type, synth_dataset
from .evalreport import EvalReport, accuracy, compare_modes, mean_of_runs
from .estimator import VqaChoiceClassifier, check_instances

__version__ = "0.1.0"
