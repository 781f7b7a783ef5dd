"""Multi-domain graph learning with external retrieval stores.

The package pre-trains dual graph encoders (a text view over fused node
features and a structural view over closed-walk signatures) against each
other, stores retrievable text chunks and graph motifs in exact-scan vector
stores, and adapts to new graphs few-shot by tuning a single prompt vector
over retrieval-augmented embeddings.
"""

from .adapt import (
    Episode,
    EpisodeResult,
    RetrievalPolicy,
    domain_gates,
    finetune_loss,
    init_prompt,
    nearest_prototype,
    run_episode,
    semantic_augment,
    semantic_query_text,
    structural_augment,
)
from .config import RunConfig, apply_overrides
from .encoder import (
    AdamState,
    EncoderDims,
    adam_step,
    attach_token,
    copy_params,
    encode_view,
    encode_view_backward,
    gnn_backward,
    gnn_forward,
    grad_check,
    init_params,
    params_close,
    params_from_jsonable,
    params_to_jsonable,
    token_key,
)
from .errors import (
    ConfigError,
    EmbeddingLookupError,
    GraphMemError,
    GraphValidationError,
    NumericalError,
    ParameterError,
    ParseError,
    ValidationError,
)
from .graphs import (
    EgoSubgraph,
    Graph,
    adjacency,
    ego_subgraph,
    load_graph_bundle,
    normalized_adjacency,
    save_graph_bundle,
)
from .harness import (
    LodoSplit,
    correlation_map,
    evaluate,
    leave_one_out_splits,
    run_split,
    sample_episodes,
)
from .model import GraphMemModel
from .pipeline import (
    Checkpoint,
    GraphInputs,
    build_stores,
    load_checkpoint,
    prepare_graph_inputs,
    pretrain_pipeline,
    save_checkpoint,
    standardize_columns,
    struct_view_input,
    text_view_input,
    view_bundle,
)
from .pretrain import (
    ViewBundle,
    evaluate_alignment,
    gaussian_kl,
    infonce_loss,
    pretrain_loss,
    run_pretraining,
)
from .store import (
    RetrievalResult,
    SemanticRecord,
    SemanticStore,
    StructuralRecord,
    StructuralStore,
)
from .synth import SyntheticSpec, benchmark_spec, generate_synthetic
from .textpipe import (
    Chunk,
    HashingEmbedder,
    PcaAligner,
    PrefixedDocument,
    chunk_document,
    fuse_features,
    load_external_embeddings,
    render_prefix,
)
from .walks import (
    AnchorScore,
    ClosedWalkEncoder,
    WalkSignature,
    anchor_scores,
    path_cycle_pair,
    select_anchors,
    walk_signature_matrix,
    walk_signatures,
)

__version__ = "0.1.0"
