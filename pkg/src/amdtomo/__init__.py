"""Autonomous material decomposition for hyperspectral neutron CT.

The package turns wavelength-resolved radiograph stacks into per-material
attenuation spectra and per-material volumes with no prior knowledge of the
sample: density computation, subspace factorization, model-based
reconstruction of the few subspace coefficient volumes, clustering of the
subspace voxels into materials, and a final material-basis reconstruction.
"""

__version__ = "0.1.0"

from .tensor_io import (  # noqa: F401
    HyperTensor,
    SpectraTable,
    WavelengthGrid,
    export_spectra_csv,
    import_spectra_csv,
    load_tensor,
    save_tensor,
)
from .simulation import (  # noqa: F401
    BraggEdge,
    EdgeModel,
    Phantom,
    default_materials,
    default_phantom,
    phantom_from_config,
    simulate_openbeam,
    simulate_radiographs,
    synth_spectra,
)
from .preprocessing import (  # noqa: F401
    DensityStack,
    auto_background_mask,
    average_openbeams,
    compute_density,
    correct_background,
    smooth_openbeam,
)
from .factorization import (  # noqa: F401
    Factorization,
    NmfOptions,
    choose_subspace_dim,
    nmf,
    nmf_fixed_dictionary,
)
from .tomography import (  # noqa: F401
    MbirOptions,
    PriorParams,
    ReconResult,
    ScanGeometry,
    backproject,
    fbp,
    mbir_reconstruct,
    project,
    reconstruct_stack,
    uniform_angles,
)
from .clustering import (  # noqa: F401
    GmmModel,
    GmmOptions,
    Segmentation,
    fit_gmm,
    match_materials,
    material_dictionary,
    reduce_mixture,
    segment,
)
from .pipeline import (  # noqa: F401
    PipelineConfig,
    RunReport,
    StageError,
    compare_runs,
    load_config,
    masks_from_phantom,
    run_amd,
    run_rdmd,
    run_simulation,
    write_reference_config,
)
