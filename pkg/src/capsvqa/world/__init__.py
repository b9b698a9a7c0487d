from .scene import (
    COLORS,
    DEFAULT_CONFIG,
    ORACLE_CHANNELS,
    SHAPES,
    SIZES,
    Scene,
    SceneGenerationError,
    SceneObject,
    WorldConfig,
    gen_scene,
    render,
    render_oracle,
    render_raster,
)
from .programs import (
    ANSWERS,
    ATTRIBUTES,
    DIRECTIONS,
    FAMILIES,
    IllPosedQuestionError,
    ProgramError,
    ProgramNode,
    execute_program,
    grounding_objects,
    sink_index,
    validate_program,
)
from .questions import QAGenerationError, QAPair, make_qa, scene_questions
from .data import (
    Dataset,
    gen_dataset,
    read_dataset,
    validate_dataset,
    validate_qa,
    validate_scene,
    write_dataset,
)

__all__ = [
    "ANSWERS",
    "ATTRIBUTES",
    "COLORS",
    "DEFAULT_CONFIG",
    "DIRECTIONS",
    "Dataset",
    "FAMILIES",
    "IllPosedQuestionError",
    "ORACLE_CHANNELS",
    "ProgramError",
    "ProgramNode",
    "QAGenerationError",
    "QAPair",
    "SHAPES",
    "SIZES",
    "Scene",
    "SceneGenerationError",
    "SceneObject",
    "WorldConfig",
    "execute_program",
    "gen_dataset",
    "gen_scene",
    "grounding_objects",
    "make_qa",
    "read_dataset",
    "render",
    "render_oracle",
    "render_raster",
    "scene_questions",
    "sink_index",
    "validate_dataset",
    "validate_program",
    "validate_qa",
    "validate_scene",
    "write_dataset",
]
