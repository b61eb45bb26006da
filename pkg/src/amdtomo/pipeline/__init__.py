from .compare import ComparisonTable, compare_runs  # noqa: F401
from .config import (  # noqa: F401
    ClusteringConfig,
    GeometryConfig,
    GridConfig,
    InputsConfig,
    MbirConfig,
    NmfConfig,
    PipelineConfig,
    PreprocessingConfig,
    PriorConfig,
    RdmdConfig,
    SimulationConfig,
    load_config,
    parse_config,
    reference_config_text,
    write_reference_config,
)
from .run import (  # noqa: F401
    AMD_STAGES,
    RDMD_STAGES,
    RunReport,
    StageError,
    masks_from_phantom,
    run_amd,
    run_rdmd,
    run_simulation,
)
