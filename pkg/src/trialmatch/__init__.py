"""trialmatch: hybrid metadata+vector clinical trial matching with
criterion-level eligibility screening via a schema-enforced model gateway."""

from .criteria import (
    Connector,
    CriterionNode,
    CriterionTree,
    CriterionVerdict,
    NodeKind,
    Side,
    TrialScore,
    Verdict,
    aggregate,
    evaluate_leaf,
    evaluate_tree,
    structure_criteria,
)
from .docstore import MetadataQuery, TrialStore
from .evalkit import (
    Adjudication,
    AnnotationRecord,
    EvaluationReport,
    KeyedVerdict,
    ReferenceVerdict,
    TransitionMatrix,
    apply_adjudications,
    build_reference,
    compute_accuracy,
    extract_discrepancies,
    majority_vote,
)
from .gateway import (
    BackendConfig,
    BackendKind,
    BoolSchema,
    EnumSchema,
    GatewayRequest,
    ListSchema,
    NumberSchema,
    OutputSchema,
    PromptSection,
    RecordField,
    RecordSchema,
    SchemaViolation,
    TaskTag,
    TextSchema,
    complete_structured,
    validate,
)
from .ingest import (
    ClinicalTrial,
    PatientRecord,
    TextChunk,
    chunk_text,
    compose_embedding_text,
    load_patient_records,
    parse_trial_record,
)
from .pipeline import (
    MatchReport,
    PipelineConfig,
    extract_metadata_query,
    generate_queries,
    match_patient,
    render_report_text,
    retrieve_candidates,
    screen_relevance,
)
from .vecindex import ChunkEntry, MockEmbedder, RemoteEmbedder, SearchHit, VectorIndex, cosine_distance

__version__ = "0.1.0"
