"""Few-shot sequence labeling with a prototypical classification head.

Subpackages cover the experimental toolchain end to end: corpus parsing
and BIO span extraction, label-noise injection and few-shot reduction,
pluggable token encoders, the prototypical head itself, episodic training,
entity-level scoring, and training-dynamics analytics (forgetting events
and loss-threshold noise detection).
"""

from .corpus import (
    ColumnSpec,
    Dataset,
    EntitySpan,
    Sentence,
    Token,
    extract_entities,
    parse_conll,
    serialize_conll,
)
from .dynamics import (
    EventLedger,
    compute_events,
    detect_noise,
    detection_metrics,
    histogram_first_learning,
    noisy_token_accuracy,
)
from .encoder import HashEncoder, load_embeddings, load_embeddings_file
from .metrics import entity_prf1, token_accuracy
from .perturb import inject_noise, reduce_few_shot
from .proto import (
    PrototypeState,
    class_probabilities,
    compute_centroids,
    distance_vector,
    predict,
    proto_loss,
    update_running_centroids,
)
from .train import TrainConfig, run_training, sample_episode

__version__ = "0.1.0"
