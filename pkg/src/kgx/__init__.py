"""Knowledge-graph reasoning lab: victim API, extraction attack, evaluation."""

import os as _os

# Desk-scale matrices are small: single-threaded BLAS is faster here and keeps
# summation order fixed for byte-identical reruns.  Only effective when numpy
# has not been imported yet; explicit user settings win.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from .kg import (  # noqa: F401
    GeneratorSpec,
    KgBuilder,
    KgError,
    KgSplit,
    KnowledgeGraph,
    ParseError,
    RelationSpec,
    SchemaError,
    SplitError,
    desk_generator_spec,
    load_generator_spec,
    load_kg,
    load_kg_dir,
    save_kg,
    split_private,
    synth_kg,
)
from .queries import (  # noqa: F401
    ConjunctiveQuery,
    PathQuery,
    QueryStructureError,
    exact_answer,
    path_from_text,
    path_to_text,
    query_from_json,
    query_to_json,
    reverse_path,
)
from .model import (  # noqa: F401
    EmbeddingModel,
    RankedAnswer,
    TrainConfig,
    TrainingDivergedError,
    answer_ranked,
    embed_query,
    hits_at_k,
    load_model,
    nearest_neighbor,
    sample_training_queries,
    save_model,
    score_from_distance,
    train,
)
from .service import (  # noqa: F401
    ApiResponse,
    BadQueryError,
    BudgetLedger,
    DefensePolicy,
    ExactBackend,
    KgrService,
    ModelBackend,
    QuotaExhaustedError,
    create_app,
    laplace_perturb,
)
from .attack import (  # noqa: F401
    ApiClient,
    AttackConfig,
    CalibrationError,
    ExtractedGraph,
    ExtractionState,
    HttpClient,
    InProcessClient,
    PathHit,
    bootstrap,
    calibrate_threshold,
    consolidate_pair,
    generate_entity_pair,
    load_extracted,
    record_hit,
    run_attack,
    suggest_paths,
    trim_path,
    validate_path,
    write_extraction,
)
from .evaluate import (  # noqa: F401
    DistanceRow,
    Matching,
    MetricsReport,
    UtilityReport,
    compute_metrics,
    evaluate_extraction,
    grow_matching,
    sample_utility_queries,
    unmatched_by_distance,
    utility_report,
)
