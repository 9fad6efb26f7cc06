from .assemble import (
    LambdaRepresentation,
    LanguageFeature,
    Projector,
    assemble_aligned,
    assemble_lambda,
    assemble_language,
    assemble_narrative,
    assemble_scene,
    build_lambda,
    narrative_prompt,
    render_prompt,
)
from .providers import (
    EmbeddingProvider,
    ExclusiveProvider,
    FeatureBlock,
    FileProvider,
    MemoryProvider,
    Provenance,
    RandomProvider,
    RemoteProvider,
    caption_phase,
)
from .registry import (
    DEFAULT_SOURCES,
    GROUP_ABBREV,
    GROUPS,
    VISUAL_GROUPS,
    SourceRegistry,
    SourceSpec,
    load_registry,
    register_sources,
)
