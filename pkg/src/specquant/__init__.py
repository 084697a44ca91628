"""Synthetic absorption spectra, principal-component decomposition and
concentration quantifiers for gas mixtures."""

__version__ = "0.1.0"

from .decomposition import (
    PcBasis,
    ReconstructionMetrics,
    ScoreMatrix,
    compare_flavors,
    explained_variance,
    fit_pca,
    load_basis,
    project,
    reconstruct,
    reconstruction_metrics,
)
from .errors import (
    ConditioningError,
    ConfigurationError,
    ConvergenceError,
    NumericalError,
    SpecquantError,
)
from .evaluation import (
    EvalReport,
    ModelSpec,
    SaturationFit,
    export_plot_data,
    kfold_evaluate,
    out_of_range_study,
    sweep_pc_count,
    sweep_snr,
    sweep_training_size,
)
from .library import GasLibrary, load_library, overlap_matrix, synthesize_library
from .model_io import load_model, save_model
from .quantifiers import (
    DirectModel,
    LrModel,
    PlsrModel,
    TfModel,
    estimate_overlap_noise,
    estimate_system_noise,
    fit_lr,
    fit_plsr,
    fit_tf,
    predict_lr,
    predict_plsr,
    predict_tf,
    sparsify_to_direct,
)
from .spectral import Spectrum, WavelengthGrid, inner_product, norm, read_spectra_csv, write_spectra_csv
from .synth import (
    ConcentrationScheme,
    NoiseSpec,
    SpectraDataset,
    forward_spectrum,
    generate_dataset,
    load_dataset,
    save_dataset,
)
