"""mem4d: a 4D spatio-temporal object memory with retrieval-augmented reasoning.

Object-level records anchored in metric space and time, indexed along
semantic, spatial, and temporal axes, with match-based continuous
integration, multi-agent merging, and an iterative retrieval loop serving
context to a pluggable reasoner.
"""

from .core import (
    DatabaseConfig,
    EgoState,
    Mem4DError,
    ObjectEntry,
    Provenance,
    Revision,
    SemanticRecord,
    SpatialRecord,
    TemporalRecord,
    entry_canonical,
    entry_from_dict,
    entry_to_dict,
    new_entry_id,
)
from .database import KnowledgeDatabase, new_database
from .featuregen import (
    CameraModel,
    DescriptionProvider,
    MaskedObservation,
    MockDescriptionProvider,
    build_entry,
    compute_centroid,
    compute_extent,
    project_points,
)
from .semindex import Embedder, HttpEmbedder, MockEmbedder, cosine, semantic_search
from .spaindex import SpatialKey, insert_anchor, spatial_search, to_ego
from .temindex import TemporalKey, record_observation, resolve_relative, temporal_search
from .matcher import (
    DefaultDecider,
    MatchDecider,
    MatchDecision,
    find_matches,
    integrate,
    propose_to_agent,
)
from .query import (
    QueryKeys,
    RetrievedRecord,
    SemanticKey,
    build_context,
    execute,
    keys_from_dict,
    keys_to_dict,
    parse_query,
    unparse_query,
)
from .loopdriver import (
    HttpReasoner,
    LoopTrace,
    Reasoner,
    ReasonerReply,
    ScriptedReasoner,
    answer,
    assess_answerability,
    broaden,
)
from .collab import FrameTransform, MergeReport, align_frames, merge
from .persistence import (
    EventLog,
    attach_log,
    load,
    load_bytes,
    open_directory,
    replay,
    save_directory,
    snapshot,
    snapshot_bytes,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
