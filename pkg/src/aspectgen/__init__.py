"""Cross-modal zero-shot generation of product attribute-value pairs.

Train a projector and text decoder on captions and gold aspects alone, then
decode aspects straight from image embeddings of a frozen dual encoder and
correct them against prompted VQA answers and OCR evidence.
"""

from .core import (
    Aspect,
    AspectGenError,
    AspectSet,
    DimensionMismatchError,
    EmbeddingVector,
    MalformedAspectError,
    ZeroVectorError,
    cosine_similarity,
    normalize_attribute,
    normalize_value,
    parse_all,
    parse_aspect,
    serialize_aspects,
)
from .adapters import (
    AdapterConfig,
    AdapterSuite,
    AdapterUnavailableError,
    CachedAdapters,
    ImageUnreadableError,
    InputTooLongError,
    OcrToken,
    PromptAnswer,
    StubAdapters,
    SubprocessAdapters,
    build_adapters,
)
from .data import (
    CorpusFormatError,
    InfeasibleSplitError,
    LoadResult,
    ProductRecord,
    SynonymMap,
    UnknownIdError,
    ValidationReport,
    ZeroShotSplit,
    collect_attribute_vocabulary,
    load_corpus,
    merge_equivalent_aspects,
    sample_zero_shot_split,
    validate_split,
)
from .training import (
    CaptionMissingError,
    DecoderCheckpoint,
    EmptyAspectsError,
    GreedyGenerator,
    NonFiniteLossError,
    Projector,
    TrainConfig,
    TrainResult,
    build_training_text,
    project,
    reconstruct,
    train_decoder,
)
from .inference import (
    AspectTraceEntry,
    InferenceConfig,
    ProductInference,
    collect_prompt_answers,
    correct_aspects,
    decode_aspects,
    infer_batch,
    infer_product,
)
from .evaluation import (
    AttributeMismatchError,
    IdMismatchError,
    MatchJudgement,
    MetricsReport,
    accuracy80,
    aspect_match_score,
    compute_report,
    micro_macro_f1,
    report_by_group,
    rouge1,
)

__version__ = "0.1.0"
