"""Desk-scale adversarial robustness toolkit.

Training defenses built on bidirectional targeted attacks, attention
distillation from a frozen clean-trained teacher, and metric learning;
plus a gradient attack suite and an evaluation harness.
"""

from .attacks import (AdversarialPair, AttackConfig, bidirectional_pair,
                      cw_margin, fgsm, mim, most_confusing_class, named_attack,
                      pgd, project_linf, run_attack, table1_suite)
from .attention import attention_map, grad_cam, kd_loss, save_attention_map
from .data import (ClassIndex, CorruptDataError, Dataset, build_class_index,
                   load_dataset, make_synthetic, sample_from_class)
from .estimator import AdversarialPerturber, RobustImageClassifier
from .evaluation import (EvalResult, RobustnessReport, accuracy_sweep,
                         attention_fidelity, black_box, clean_accuracy,
                         evaluate_suite, export_embeddings, generate_attack_set,
                         knn_accuracy, knn_from_dumps, load_embedding_dump,
                         robust_accuracy)
from .experiment import (DatasetSpec, ExperimentConfig, register_artifact,
                         resolve_out_dir, verify_manifest)
from .losses import (LossBreakdown, LossWeights, agkd_loss, angular_distance,
                     bml_loss, smoothed_cross_entropy, total_loss, triplet_loss)
from .models import (ArchDescriptor, CheckpointError, ImageClassifier,
                     LinearClassifier, LossSpec, ModelOutputs, SmallCNN,
                     WideResNetLite, build_model, freeze, input_gradient,
                     load_checkpoint, parameter_hash, save_checkpoint)
from .seeding import derive_seed, seed_stream
from .training import (TrainConfig, TrainLogRecord, TrainResult, lr_at,
                       make_descriptor, train)
from .validation import InvalidInputError

__version__ = "0.1.0"
