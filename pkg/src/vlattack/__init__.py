"""Transfer attacks on image-text retrieval models.

Text side: one-word synonym substitution that minimizes image-text cosine.
Image side: layer-importance-weighted PGD initialization followed by a
multi-scale contrastive PGD refinement. Retrieval metrics score the result.
"""

__version__ = "0.1.0"

from .core import (AdversarialRecord, AttackConfig, ImageSample, ImageTextPair, PairBatch, PerturbBudget,
                   TextSample, cosine, linf_distance, load_manifest, word_edit_distance)
from .backend import (Backend, BackendDescriptor, CapabilityError, EncoderOutput, LinearBackend, ToyBackend,
                      ToyConfig, build_backend, layer_diagnostics)
from .lexicon import StaticSynonyms, VectorStore, load_vectors, substitute_set
from .text_attack import Lexicon, candidate_texts, select_adversarial_text
from .image_attack import (ContrastSets, PgdProblem, attack_image, build_contrast_sets, contrastive_loss,
                           layer_importance, pgd_optimize, random_init, trans_scales, weighted_layer_loss)
from .retrieval import Gallery, RetrievalReport, attack_success, evaluate, retrieve_top_k, similarity_gap
from .pipeline import RunManifest, attack_batch, attack_dataset, attack_pairs, evaluate_records
from .fixture import make_fixture
